from .recon import (ComparisonReport, IdentityCheat, LastValuePredictor, MeanPredictor, PerturbReport, ReconTable,
                    compare_policies, context_curve, eval_plans, evaluate_reconstruction, perturb_history,
                    perturbation_study, write_predictions_csv)
from .stats import (BootstrapCI, UndefinedStatistic, auprc, auroc, bootstrap_ci, cohens_d_paired, pearson_r, r2,
                    wilcoxon_exact_null, wilcoxon_signed_rank)
