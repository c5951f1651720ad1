"""Linear-quadratic mean-field games with state and control delay.

Decentralised strategies from the consistency (NCE) field, Case I Riccati
feedback, the Case II explicit recursion, Monte Carlo verification of the
approximate Nash property and an exact scenario-tree oracle.
"""

__version__ = "0.1.0"

from .model import ModelSpec, load_spec, validate_spec  # noqa: E402,F401
from .timegrid import TimeGrid, build_grid  # noqa: E402,F401
