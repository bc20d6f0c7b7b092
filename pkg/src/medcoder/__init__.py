"""Desk-scale prompt-based multi-label clinical code assignment."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor  # noqa: F401
from .encoder import EncoderConfig, TokenSequence  # noqa: F401
from .ontology import OntologyGraph  # noqa: F401
from .prompt import LabelSpace, Verbalizer  # noqa: F401
