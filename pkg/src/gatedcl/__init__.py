"""Conditional channel-gated networks for continual learning.

Per-task binary gates over a shared convolutional backbone, sparsity-driven
capacity allocation, relevance-based kernel freezing, and a replay-rehearsed
task classifier for inference without a task oracle.
"""

__version__ = "0.1.0"

from .backbone import ArchSpec, ContinualGatedNet, GatedResidualBlock
from .config import TrainConfig, profile_config
from .data import build_split_stream, load_split_mnist, synthetic_stream
from .gates import GateModule, GateVector, SparsityConfig, sample_gates, sparsity_loss
from .replay import EpisodicBuffer, make_rehearsal_batch
from .trainer import ContinualTrainer, evaluate, setup_determinism

__all__ = [
    "ArchSpec", "ContinualGatedNet", "GatedResidualBlock", "TrainConfig",
    "profile_config", "build_split_stream", "load_split_mnist",
    "synthetic_stream", "GateModule", "GateVector", "SparsityConfig",
    "sample_gates", "sparsity_loss", "EpisodicBuffer", "make_rehearsal_batch",
    "ContinualTrainer", "evaluate", "setup_determinism", "__version__",
]
