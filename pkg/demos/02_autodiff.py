"""
The numpy autodiff underneath the model
=======================================

Every parameter is a ``Tensor``; ops record how to push gradients back and
``backward`` walks the graph once.  ``finite_diff_check`` compares the
result with central differences.
"""

import numpy as np

from cause import tensor as T
from cause.tensor import Tensor, finite_diff_check

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

loss = T.sum_(T.gelu(T.matmul(x, w)))
T.backward(loss)
print("loss", float(loss.data))
print("dL/dw\n", w.grad)

# relative error between analytic and numeric gradients
err = finite_diff_check(lambda: T.sum_(T.gelu(T.matmul(x, w))), [x, w])
print(f"max relative error {err:.2e}")

# causal attention: position i only attends to positions <= i
q = k = v = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
out = T.scaled_dot_attention(q, k, v, T.causal_mask(5))
print("attention output shape", out.shape)
