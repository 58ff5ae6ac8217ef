"""oodmon: build, tune, and evaluate out-of-distribution monitors for numpy networks."""
from . import data, evaluate, monitors, nn, optimize, tensor
from .data import LabeledDataset, OodClassId, SplitDataset
from .monitors import FittedMonitor, Verdict
from .nn import Network

__version__ = "0.1.0"

__all__ = ["data", "evaluate", "monitors", "nn", "optimize", "tensor", "LabeledDataset", "OodClassId",
           "SplitDataset", "FittedMonitor", "Verdict", "Network", "__version__"]
