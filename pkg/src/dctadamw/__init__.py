"""Low-rank AdamW with DCT column selection."""
from .analysis import memory_model
from .efq import EfMode
from .optimizer import DCTAdamW, Hyper
from .projector import NormMode, ProjectorKind, Side, select
from .transform import build_dct3, get_basis

__all__ = ["DCTAdamW", "EfMode", "Hyper", "NormMode", "ProjectorKind", "Side",
           "build_dct3", "get_basis", "memory_model", "select"]
