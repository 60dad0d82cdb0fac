"""Sequential modular multimodal networks with a parallel-fusion baseline."""

from .data import (
    Dataset,
    DatasetManifest,
    ModalitySpec,
    MultiModSample,
    SynthSpec,
    TaskSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    stratified_kfold,
)
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    MultiModNError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from .model import ArchSpec, MultiModN, forward_sequence, init_model, load_model, save_model
from .pfusion import PFusionModel, init_pfusion
from .training import TrainingConfig, evaluate, fit

__version__ = "0.1.0"
