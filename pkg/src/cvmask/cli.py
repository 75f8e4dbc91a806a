"""Command-line driver: cohort generation, volatility statistics, pretraining and evaluation.

Every subcommand resolves its settings from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags (flags win). The
resolved config is echoed into every artifact together with its hash, the
seed and the package version.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evalkit import (ReconTable, compare_policies, context_curve, evaluate_reconstruction, perturbation_study,
                      write_predictions_csv)
from .evalkit.recon import NOISE_FACTOR
from .evalkit.stats import UndefinedStatistic
from .meds import DataError, Vocabulary, parse_events, read_labels, write_events, write_labels
from .model import VOMAE, ModelConfig, config_hash
from .nn import load_arrays
from .nn.tensor import GraphError, NonFiniteError, parameter
from .pipeline import prepare
from .synth import LABEL_TASK, CohortSpec, SpecError, generate_cohort, standard_benchmark
from .trainer import ProbeConfig, TrainConfig, TrainState, pretrain, train_linear_probe
from .volatility import PolicyError, WeightMap, save_json, stats_to_json

log = logging.getLogger("cvmask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GLOBAL = {"seed": 42, "out_dir": "out", "policy": "cv", "scale": "desk"}
DEFAULTS = {
    "gen": {"patients": 200, "n_codes": 16, "spec": None},
    "stats": {"data": None},
    "pretrain": {"data": None, "lr": None, "max_epochs": None, "patience": None, "batch_size": None,
                 "resume": None, "epochs_this_call": None},
    "eval": {"data": None, "model": None, "split": "test", "eval_seed": 2024, "eval_policy": "random"},
    "compare": {"a": None, "b": None},
    "probe": {"data": None, "model": None, "labels": None, "task": LABEL_TASK, "random_labels": False,
              "probe_epochs": 50, "probe_lr": 1e-4, "n_boot": 1000, "probe_runs": 3},
    "perturb": {"data": None, "model": None, "split": "test", "eval_seed": 2024, "noise_seed": 7,
                "factor": NOISE_FACTOR},
    "context": {"data": None, "model": None, "split": "test", "eval_seed": 2024},
    "report": {"runs": None},
}
POLICIES = ("random", "variance", "cv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# config --------------------------------------------------------------------

def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    cfg = dict(GLOBAL)
    cfg.update(DEFAULTS[cmd])
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {cmd!r}: {', '.join(unknown)}")
        cfg.update(doc)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["policy"] not in POLICIES:
        raise UsageError(f"policy must be one of {POLICIES}")
    if cfg["scale"] not in ("desk", "paper"):
        raise UsageError("scale must be desk or paper")
    return cfg


def provenance(cmd: str, cfg: dict) -> dict:
    return {"command": cmd, "config": cfg, "config_hash": config_hash({"command": cmd, **cfg}),
            "seed": cfg["seed"], "version": __version__}


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    save_json(path, doc)
    log.info("wrote %s", path)


# subcommands ---------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    if cfg["spec"]:
        spec = CohortSpec.load(cfg["spec"])
    else:
        spec = standard_benchmark(cfg["patients"], cfg["seed"], cfg["n_codes"])
    seqs, vocab = generate_cohort(spec)
    out = _out(cfg)
    write_events(out / "events.csv", seqs, vocab)
    write_labels(out / "labels.csv", seqs)
    _write_json(out / "cohort_spec.json", {"spec": spec.to_json(), **provenance("gen", cfg)})
    return EXIT_OK


def _load_cohort(cfg, vocab=None):
    _require(cfg, "data")
    seqs, vocab, rejected = parse_events(cfg["data"], vocab)
    if rejected:
        log.warning("%d malformed rows skipped (first at line %d: %s)", len(rejected), *rejected[0])
    if not seqs:
        raise DataError(f"{cfg['data']}: no events")
    return seqs, vocab


def cmd_stats(cfg: dict) -> int:
    seqs, vocab = _load_cohort(cfg)
    prep = prepare(seqs, vocab, seed=cfg["seed"])
    wm = prep.weights(cfg["policy"], cfg["seed"])
    out = _out(cfg)
    prov = provenance("stats", cfg)
    _write_json(out / "code_stats.json", {"codes": stats_to_json(prep.code_stats, vocab.name), **prov})
    _write_json(out / f"weights_{cfg['policy']}.json", {**wm.to_json(vocab.name), **prov})
    _write_json(out / "norm_stats.json", {**prep.norm_stats.to_json(vocab), **prov})
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "split"])
        for sid in sorted(prep.assignment):
            w.writerow([sid, prep.assignment[sid]])
    return EXIT_OK


def _train_config(cfg) -> TrainConfig:
    over = {k: cfg[k] for k in ("lr", "max_epochs", "patience", "batch_size") if cfg[k] is not None}
    try:
        return TrainConfig.preset(cfg["scale"], seed=cfg["seed"], policy=cfg["policy"], **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_pretrain(cfg: dict) -> int:
    seqs, vocab = _load_cohort(cfg)
    out = _out(cfg)
    state = None
    if cfg["resume"]:
        state, model_cfg, train_cfg = TrainState.load(cfg["resume"])
        if model_cfg.vocab_size != len(vocab):
            raise DataError("resume checkpoint vocabulary does not match the data")
        if train_cfg.seed != cfg["seed"] or train_cfg.policy != cfg["policy"]:
            raise UsageError("resume checkpoint was trained with a different seed or policy")
    else:
        model_cfg = ModelConfig.preset(cfg["scale"], len(vocab))
        train_cfg = _train_config(cfg)
    prep = prepare(seqs, vocab, seed=cfg["seed"], max_len=model_cfg.max_len)
    wm = prep.weights(cfg["policy"], cfg["seed"])
    model, report, state = pretrain(prep.norm["train"], prep.norm["valid"], wm, train_cfg, model_cfg, state=state,
                                    max_epochs_this_call=cfg["epochs_this_call"])
    prov = provenance("pretrain", cfg)
    state.save(out / "state.bin", model_cfg, train_cfg)
    model.save(out / "model.bin", extra={"code_names": vocab.code_names, "split_seed": cfg["seed"],
                                         "policy": cfg["policy"], "weights": wm.to_json(vocab.name), **prov})
    report.write(out, extra={"cv_by_code": {vocab.name(c): v for c, v in sorted(prep.cv_by_code().items())},
                             **prov})
    return EXIT_OK


def _load_model(cfg):
    _require(cfg, "model")
    try:
        arrays, man = load_arrays(cfg["model"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{cfg['model']}: unreadable checkpoint ({exc})") from exc
    mcfg = ModelConfig(**man["model_config"])
    model = VOMAE(mcfg, {k: parameter(v, name=k) for k, v in arrays.items()})
    vocab = Vocabulary(man["code_names"])
    seqs, vocab2 = _load_cohort(cfg, vocab)
    if len(vocab2) != len(vocab):
        raise DataError("data contains codes unknown to the model")
    prep = prepare(seqs, vocab, seed=man["split_seed"], max_len=mcfg.max_len)
    return model, man, prep


def _cv_map(prep):
    return {prep.vocab.name(c): v for c, v in sorted(prep.cv_by_code().items())}


def _eval_weights(cfg, prep) -> WeightMap | None:
    return None if cfg["eval_policy"] == "random" else prep.weights(cfg["eval_policy"], cfg["eval_seed"])


def cmd_eval(cfg: dict) -> int:
    model, man, prep = _load_model(cfg)
    seqs = prep.norm[cfg["split"]]
    table = evaluate_reconstruction(model, seqs, prep.norm_stats, _eval_weights(cfg, prep), cfg["eval_seed"])
    out = _out(cfg)
    name = prep.vocab.name
    _write_json(out / "recon.json", {**table.to_json(name), "cv_by_code": _cv_map(prep),
                                     "model_policy": man["policy"], **provenance("eval", cfg)})
    table.write_csv(out / "recon.csv", name)
    write_predictions_csv(out / "predictions.csv", table, prep.norm_stats, name)
    return EXIT_OK


def _table_from_json(doc, index) -> ReconTable:
    return ReconTable({index[k]: row for k, row in doc["per_code"].items()}, {}, doc.get("overall", {}))


def cmd_compare(cfg: dict) -> int:
    _require(cfg, "a", "b")
    docs = []
    for key in ("a", "b"):
        try:
            docs.append(json.loads(Path(cfg[key]).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{cfg[key]}: not JSON ({exc})") from exc
    a, b = docs
    names = sorted(set(a["per_code"]) | set(b["per_code"]))
    index = {n: i for i, n in enumerate(names)}
    cv = {index[n]: v for n, v in a["cv_by_code"].items() if n in index}
    rep = compare_policies(_table_from_json(a, index), _table_from_json(b, index), cv)
    _write_json(_out(cfg) / "compare.json", {**rep.to_json(lambda i: names[i]), "a": cfg["a"], "b": cfg["b"],
                                             "a_policy": a.get("model_policy"), "b_policy": b.get("model_policy"),
                                             "cv_by_code": a["cv_by_code"], **provenance("compare", cfg)})
    return EXIT_OK


def cmd_probe(cfg: dict) -> int:
    model, man, prep = _load_model(cfg)
    train, test = prep.norm["train"], prep.norm["test"]
    if cfg["random_labels"]:
        rng = np.random.default_rng([cfg["seed"], 31])
        y_train = rng.integers(0, 2, len(train))
        y_test = rng.integers(0, 2, len(test))
    else:
        path = cfg["labels"] or str(Path(cfg["data"]).with_name("labels.csv"))
        labels = read_labels(path)
        try:
            y_train = [labels[s.subject_id][cfg["task"]] for s in train]
            y_test = [labels[s.subject_id][cfg["task"]] for s in test]
        except KeyError as exc:
            raise DataError(f"{path}: no {cfg['task']!r} label for {exc}") from exc
    if cfg["probe_runs"] < 1:
        raise UsageError("--probe-runs must be >= 1")
    results = []
    for r in range(cfg["probe_runs"]):
        pcfg = ProbeConfig(lr=cfg["probe_lr"], epochs=cfg["probe_epochs"], seed=cfg["seed"] + r,
                           n_boot=cfg["n_boot"])
        try:
            results.append(train_linear_probe(model, train, y_train, test, y_test, pcfg))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    # top-level metrics are the first run; the others only vary the probe seed
    aurocs = [r.auroc for r in results]
    auprcs = [r.auprc for r in results]
    doc = {**results[0].to_json(), "task": "random" if cfg["random_labels"] else cfg["task"],
           "runs": [{"seed": cfg["seed"] + i, "auroc": r.auroc, "auprc": r.auprc} for i, r in enumerate(results)],
           "auroc_mean": float(np.mean(aurocs)), "auroc_std": float(np.std(aurocs)),
           "auprc_mean": float(np.mean(auprcs)), "auprc_std": float(np.std(auprcs))}
    _write_json(_out(cfg) / "probe.json", {**doc, **provenance("probe", cfg)})
    return EXIT_OK


def cmd_perturb(cfg: dict) -> int:
    model, man, prep = _load_model(cfg)
    rep = perturbation_study(model, prep.norm[cfg["split"]], prep.norm_stats, None, cfg["eval_seed"],
                             cfg["noise_seed"], cfg["factor"])
    _write_json(_out(cfg) / "perturb.json", {**rep.to_json(prep.vocab.name), **provenance("perturb", cfg)})
    return EXIT_OK


def cmd_context(cfg: dict) -> int:
    model, man, prep = _load_model(cfg)
    rows = context_curve(model, prep.norm[cfg["split"]], len(prep.vocab), None, cfg["eval_seed"])
    out = _out(cfg)
    _write_json(out / "context.json", {"buckets": rows, **provenance("context", cfg)})
    with open(out / "context.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "n", "mae"])
        for r in rows:
            w.writerow([r["bucket"], r["n"], "" if r["mae"] is None else repr(r["mae"])])
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    """Concatenate per-epoch CSVs into one long table (run, epoch, metric, value)."""
    _require(cfg, "runs")
    rows = []
    for run in cfg["runs"]:
        p = Path(run)
        path = p / "train_report_epochs.csv" if p.is_dir() else p
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                for metric in ("train_loss", "val_loss", "lr"):
                    rows.append([str(run), rec["epoch"], metric, rec[metric]])
    out = _out(cfg) / "report_long.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "epoch", "metric", "value"])
        w.writerows(rows)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "stats": cmd_stats, "pretrain": cmd_pretrain, "eval": cmd_eval,
            "compare": cmd_compare, "probe": cmd_probe, "perturb": cmd_perturb, "context": cmd_context,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvmask", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--policy", choices=POLICIES)
        p.add_argument("--scale", choices=("desk", "paper"))
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("gen", "generate a synthetic cohort")
    p.add_argument("--patients", type=int)
    p.add_argument("--n-codes", type=int)
    p.add_argument("--spec", help="cohort spec JSON instead of the standard benchmark")

    p = add("stats", "per-code statistics and masking weights")
    p.add_argument("--data")

    p = add("pretrain", "pretrain a VO-MAE under a masking policy")
    p.add_argument("--data")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="state.bin from an earlier run")
    p.add_argument("--epochs-this-call", type=int, help="stop after this many epochs (resumable)")

    for name, help_ in (("eval", "per-code reconstruction"), ("perturb", "history perturbation study"),
                        ("context", "error by amount of same-code history")):
        p = add(name, help_)
        p.add_argument("--data")
        p.add_argument("--model")
        p.add_argument("--split", choices=("train", "valid", "test"))
        p.add_argument("--eval-seed", type=int)
        if name == "eval":
            p.add_argument("--eval-policy", choices=POLICIES)
        if name == "perturb":
            p.add_argument("--noise-seed", type=int)
            p.add_argument("--factor", type=float)

    p = add("compare", "paired comparison of two recon.json reports (delta = a - b)")
    p.add_argument("--a")
    p.add_argument("--b")

    p = add("probe", "linear probe on the frozen encoder")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--labels")
    p.add_argument("--task")
    p.add_argument("--random-labels", action="store_true", default=None)
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--probe-lr", type=float)
    p.add_argument("--n-boot", type=int)
    p.add_argument("--probe-runs", type=int)

    p = add("report", "merge per-epoch CSVs into a long-format table")
    p.add_argument("--runs", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"cvmask {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, UndefinedStatistic, GraphError) as exc:
        print(f"cvmask {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SpecError, PolicyError, OSError, KeyError) as exc:
        print(f"cvmask {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
