# Context features computed from a previous stage's probabilities
from acseg.autocontext.autoctx import (
    assemble_autocontext_2d,
    assemble_autocontext_3d,
    autocontext_dim,
)

__all__ = ["assemble_autocontext_2d", "assemble_autocontext_3d", "autocontext_dim"]
