"""Multi-branch residual networks whose branch connectivity is learned with the weights."""
from .analysis import ConnectivityGraph, branch_histogram, build_graph, export_graph, graph_from_json, prune
from .arch import PRESETS, ArchSpec, Network, StageSpec, build_network, count_parameters, load_arch, parse_arch_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, augment, iterate_batches, load_cifar, synth_dataset, synth_splits
from .errors import (
    BranchGateError,
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    GateError,
    LabelError,
    ShapeError,
    TapeError,
)
from .gates import GateState, freeze_top_k, normalize_gates, sample_binary_gates, update_and_clip
from .kernels import BACKEND
from .tensor import Tape, Tensor
from .trainer import Phase, TrainSchedule, evaluate, make_fixed_random_gates, run_schedule, sgd_update, train_step

__version__ = "0.1.0"
