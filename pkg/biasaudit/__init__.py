__version__ = "0.1.0"

from .AuditConfig import AuditConfig
from .Cohort import (Cohort, EmbeddingSet, GroupSelector, load_cohort, load_embeddings, save_cohort,
                     save_embeddings, select_group, summarize_cohort)
from .Errors import *
from .EvaluateStage import EvaluateStage
from .InspectStage import InspectStage
from .Metrics import (AuditReport, MetricRecord, ScoreTable, auc, bootstrap_ci, build_performance_report,
                      calibrate_threshold, load_scores, relative_change, roc_curve, save_scores, subgroup_metrics)
from .Probes import PRESETS, ProbeModel, ProbeSpec, gradient_check, predict_probe, train_probe
from .Projection import ProjectionModel, TsneResult, pca_fit, pca_transform, tsne_embed
from .ReportWriter import ReportWriter
from .Sampling import (IndexMultiset, ResamplePlan, bootstrap_indices, one_scan_per_patient,
                       stratified_resample, subsample_per_group)
from .Stats import KsResult, StatReport, benjamini_yekutieli, ks_two_sample, marginal_density, run_feature_bias_test
from .SummarizeStage import SummarizeStage
from .Synth import SynthSpec, generate, oracle_scores
from .SynthStage import SynthStage
from .TrainProbeStage import TrainProbeStage
