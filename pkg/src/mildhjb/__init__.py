"""Spectral toolkit for controlled Ornstein-Uhlenbeck dynamics, mild HJB solutions and verification."""
__version__ = "0.1.0"

from .model import *  # noqa: F401,F403
from .dynamics import *  # noqa: F401,F403
from .semigroup import *  # noqa: F401,F403
from .hjb import *  # noqa: F401,F403
from .verify import *  # noqa: F401,F403
from .apps import *  # noqa: F401,F403
from . import io  # noqa: F401
