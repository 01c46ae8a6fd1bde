"""Fine-tuning vs feature extraction: experiment harness and decision aid."""
from .backbone import (
    LayeredBackbone,
    export_weights,
    forward_collect,
    freeze_prefix,
    import_weights,
    layers_for_fraction,
    toy_backbone,
    vgg16_backbone,
)
from .errors import (
    ConfigError,
    CropError,
    FitError,
    IngestError,
    InsufficientDataError,
    MetricError,
    ReportError,
    SampleError,
    ShapeError,
    TradeoffError,
    TrainError,
    WeightImportError,
)
from .fne import build_fne, discretize, fit_standardizer
from .footprint import EU27_2020_G_PER_KWH, PowerSampler, co2_of, integrate_energy
from .metrics import balanced_accuracy, fewshot_curve, relative_difference
from .orchestrator import (
    SearchLedger,
    enumerate_grid,
    load_plan,
    plan_experiments,
    run_fewshot_protocol,
    run_reselection,
    run_search,
)
from .pipelines import ExperimentRecord, FeConfig, FtConfig, run_fe_experiment, run_ft_experiment
from .recommender import RecommendationContext, recommend
from .report import render_report
from .svm import load_model, predict, save_model, train_linear_svm
from .tasks import FewShotSpec, TaskDataset, load_dataset, make_fewshot_subsets, make_synthetic_task, ten_crop

__version__ = "0.1.0"
