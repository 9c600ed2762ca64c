"""Segmentation benchmark: four architectures on a numpy autodiff core."""
from .autodiff import Tape, Tensor, backward, grad_check, no_grad
from .bench import parse_config, report, run, run_sweep
from .data import (
    FoldPlan,
    SampleSet,
    add_noise_snr,
    gen_airy_spots,
    gen_blob_cells,
    gen_vessel_tree,
    load_samples,
    make_folds,
    save_samples,
)
from .errors import (
    ConfigError,
    DegenerateLabels,
    DomainError,
    FormatError,
    OutputExists,
    SegbenchError,
    ShapeError,
    TrainingDiverged,
)
from .metrics import auc, confusion, evaluate, roc_curve
from .models import ARCHS, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, cross_validate, snr_sweep, train

__version__ = "0.1.0"
