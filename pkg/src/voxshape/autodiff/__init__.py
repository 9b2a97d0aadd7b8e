from voxshape.autodiff.core import (
    Node,
    PrimitiveKind,
    as_node,
    backward,
    forward,
    no_grad,
    register,
    registered_kinds,
)
from voxshape.autodiff import ops
from voxshape.autodiff.gradcheck import check_composite, gradient_check, numeric_grad, relative_error

__all__ = [
    "Node",
    "PrimitiveKind",
    "as_node",
    "backward",
    "check_composite",
    "forward",
    "no_grad",
    "gradient_check",
    "numeric_grad",
    "ops",
    "register",
    "registered_kinds",
    "relative_error",
]
