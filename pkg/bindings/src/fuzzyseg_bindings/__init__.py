from .engine import (
    COMPILABLE_FAMILIES,
    BoundEngine,
    compile,
    loss_and_grad,
    release,
)

__all__ = [
    "COMPILABLE_FAMILIES",
    "BoundEngine",
    "compile",
    "loss_and_grad",
    "release",
]
