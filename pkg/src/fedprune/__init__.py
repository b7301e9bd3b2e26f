"""Federated unstructured pruning by mask voting, at desk scale."""
from .errors import (FormatError, InputDomainError, NumericalError, ProtocolError, PruneError,
                     ShapeError)
from .federation import (ClientState, CommLedger, PruneConfig, Strategy, make_clients, run_centralized,
                         run_iterative, run_local_only, run_oneshot)
from .masking import ComparisonGroup
from .metrics import Metric
from .model import LinearLayer, PrunableModel, init_model

__version__ = "0.1.0"

__all__ = [
    "ClientState", "CommLedger", "ComparisonGroup", "FormatError", "InputDomainError", "LinearLayer",
    "Metric", "NumericalError", "PrunableModel", "PruneConfig", "PruneError", "ProtocolError", "ShapeError",
    "Strategy", "init_model", "make_clients", "run_centralized", "run_iterative", "run_local_only",
    "run_oneshot",
]
