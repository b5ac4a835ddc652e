"""Reverse-mode gradients through a small conv net, checked by finite differences."""
import numpy as np

from msdb.nn import Conv2dParams, conv2d, relu
from msdb.tensor import Graph, Tensor, grad_check, precision

rng = np.random.default_rng(0)

with precision(np.float64):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    conv = Conv2dParams(Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)), dilation=(2, 2), padding=(2, 2))

    with Graph() as graph:
        loss = relu(conv2d(x, conv)).mean()
        graph.backward(loss)
    print("loss", loss.item())
    print("d loss / d x[0, 0]:\n", np.round(x.grad[0, 0], 4))

    # the checker perturbs every input element and compares central differences
    err = grad_check(lambda t: relu(conv2d(t, conv)).mean(), x.data)
    print(f"max relative error vs finite differences: {err:.2e}")
