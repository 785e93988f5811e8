"""Online action detection by consulting historical and category exemplars."""

from .dataset import FeatureDataset, FeatureSequence, gen_synthetic, load_dataset, save_dataset
from .dynamic import backward_dynamic, forward_dynamic
from .evaluation import EvalReport, average_precision, calibrated_ap, evaluate
from .exemplars import ExemplarBank, build_bank, kmeans, load_bank, save_bank
from .model import Hyper, ModelParams, init_model, load_checkpoint, save_checkpoint
from .numeric import cosine_similarity, grad_check, linear, make_rng, softmax, temporal_conv1d
from .static import backward_static, forward_static
from .streaming import StreamState, detect_video, step
from .training import TrainConfig, loss, train

__version__ = "0.1.0"
