"""Dense tensors with reverse-mode automatic differentiation (numpy backed)."""
from histoage.autodiff.tensor import Tensor, Parameter, no_grad, backward, stop_gradient
from histoage.autodiff import ops
from histoage.autodiff.optim import SGD, sgd_step, cosine_lr

__all__ = ["Tensor", "Parameter", "no_grad", "backward", "stop_gradient", "ops", "SGD", "sgd_step", "cosine_lr"]
