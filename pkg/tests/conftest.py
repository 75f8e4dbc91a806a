import os

# single-threaded BLAS keeps reductions in a fixed order
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest  # noqa: E402


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the outcome."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        request.config.acceptance_lines[number] = line
        print(line)
        return ok
    return record


def pytest_runtest_makereport(item, call):
    # a criterion whose test errored before recording still gets a line
    number = getattr(item.function, "criterion", None)
    if number is not None and call.when == "call" and call.excinfo is not None:
        lines = item.config.acceptance_lines
        lines.setdefault(number, f"criterion {number:>2}  FAIL  {item.name}  [{call.excinfo.typename}]")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
