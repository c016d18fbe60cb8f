"""Joint block- and channel-wise pruning driven by a recurrent policy."""
from .errors import EvaluatorFailure, InvalidArgument, NumericalFault, VersionMismatch

__version__ = "0.1.0"
