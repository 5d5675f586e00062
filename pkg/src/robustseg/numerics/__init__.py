from .autodiff import Graph, Node, ShapeError, apply_op, value
from .gradcheck import analytic_grad, finite_diff_check
from .svd import SvdFactors, svd
from .tensor import FormatError, as_tensor, decode_tensor, encode_tensor, frozen

__all__ = [
    "FormatError", "Graph", "Node", "ShapeError", "SvdFactors", "analytic_grad", "apply_op",
    "as_tensor", "decode_tensor", "encode_tensor", "finite_diff_check", "frozen", "svd", "value",
]
