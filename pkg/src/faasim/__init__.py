"""Desk-scale distributed sparse DNN inference over emulated serverless channels."""

__version__ = "0.1.0"

from .sparse import (
    ActivationSpec,
    ModelDef,
    SparseMatrix,
    accumulate,
    apply_activation,
    extract_rows,
    serial_inference,
    spmm,
)

__all__ = [
    "ActivationSpec",
    "ModelDef",
    "SparseMatrix",
    "accumulate",
    "apply_activation",
    "extract_rows",
    "serial_inference",
    "spmm",
    "__version__",
]
