"""Change-penalized tuning of small numpy networks.

A frozen base network is corrected on a handful of misclassified samples by
training a zero-initialized change whose size is penalized, and compared
against fine-tuning, side-tuning and MAS.
"""

from .autodiff import ParamSet, Tape, Tensor
from .datagen import BiasSpec, DatasetBundle, Structure, generate
from .metrics import aggregate, balanced_accuracy, metrics_report, norm_report
from .network import ModelSpec, build_model, combined_forward, default_spec, forward
from .penalty import NormKind, PenaltyConfig
from .training import PretrainConfig, pretrain
from .tuner import Method, StoppingPolicy, TuneConfig, select_contradicting, tune

__version__ = "0.1.0"
