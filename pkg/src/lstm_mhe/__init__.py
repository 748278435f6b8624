"""LSTM-embedded moving horizon estimation for electric machine temperatures."""

from ._accel import NUMBA_AVAILABLE, backend
from .lstm import (
    DnnInput,
    LstmParams,
    LstmState,
    ThermalRates,
    dnn_forward,
    dnn_jacobian,
    load_weights,
    save_weights,
)
from .mhe import MheConfig, MheState, MovingHorizonEstimator, sqp_solve
from .harness import SimConfig, compute_metrics, fault_experiment, run_mil
from .training import TrainConfig, bptt_gradients, train

__version__ = "0.1.0"


def default_weights_path():
    """Packaged network trained on the default synthetic plant."""
    from importlib.resources import files
    return files("lstm_mhe") / "data" / "default_weights.json"


__all__ = [
    "default_weights_path",
    "NUMBA_AVAILABLE",
    "backend",
    "DnnInput",
    "LstmParams",
    "LstmState",
    "ThermalRates",
    "dnn_forward",
    "dnn_jacobian",
    "load_weights",
    "save_weights",
    "MheConfig",
    "MheState",
    "MovingHorizonEstimator",
    "sqp_solve",
    "SimConfig",
    "compute_metrics",
    "fault_experiment",
    "run_mil",
    "TrainConfig",
    "bptt_gradients",
    "train",
]
