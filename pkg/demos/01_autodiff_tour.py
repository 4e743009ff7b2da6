"""
Differentiation machinery, one piece at a time
===============================================

Run with ``python demos/01_autodiff_tour.py``.
"""

# %%
# Reverse mode on a scalar: f(x) = x^2 + 3x, so f'(2) = 7.
import numpy as np

from trat import autodiff as ad

x = ad.Var(np.array(2.0))
y = ad.add(ad.mul(x, x), ad.mul(3.0, x))
(g,) = ad.backward(y, [x])
print("f'(2) =", float(g))

# %%
# Keeping the backward graph lets us differentiate a gradient again.
# For f(w) = w^T A w the gradient is (A + A^T) w, and the gradient of
# sum((A + A^T) w) is (A + A^T) 1.
A = np.array([[1.0, 2.0], [0.0, 3.0]])
w = ad.Var(np.array([[0.5], [-1.0]]))
f = ad.sum_(ad.matmul(ad.transpose(w), ad.matmul(A, w)))
(gw,) = ad.backward(f, [w], create_graph=True)
(ggw,) = ad.grad_of_scalar_grad(ad.sum_(gw), [w])
print("grad of sum(grad):", ggw.ravel(), "expected", (A + A.T).sum(1))

# %%
# Forward mode: g'(w)u and u^T g''(w) u for a small tanh network, checked
# against a central difference along u.
from trat import forward as fw
from trat.gradcheck import random_net
from trat.ndarray import Rng

rng = Rng(0)
net = random_net(rng.child(0), (6,), 3, 3)
s = rng.gaussian((1, 3))
u = {k: rng.child(1).gaussian(v.shape) for k, v in net.params.items()}
g0, g1, g2 = (v.value for v in fw.hvp_quadratic(lambda p: net.forward(s, p), net.params, u))

h = 1e-4
plus = net.logits(s, {k: net.params[k] + h * u[k] for k in u})
minus = net.logits(s, {k: net.params[k] - h * u[k] for k in u})
print("jvp      ", g1.ravel())
print("central  ", ((plus - minus) / (2 * h)).ravel())
print("hvp      ", g2.ravel())
print("2nd diff ", ((plus - 2 * g0 + minus) / h**2).ravel())

# %%
# The quadratic expansion leaves a cubic remainder, so halving the step
# should shrink it by about 8.
from trat.gradcheck import taylor_remainder_ratio

ratio, t = taylor_remainder_ratio(net, s, u)
print(f"remainder ratio {ratio:.4f} at t = {t:g}")

# %%
# Row sums over the final weight matrix.  For softmax outputs the first
# order sum has the closed form p_j (1 - p_j) sum(h), and the second
# order sum is identically zero because each row of p is shift invariant.
from trat import losses

single = random_net(rng.child(2), (), 3, 4)
x1 = rng.gaussian((3,))
z = losses.gradrow_sum_vector(single, x1).value
z2 = losses.hessrow_sum_vector(single, x1).value
logits = single.logits(x1[None])[0]
p = np.exp(logits - logits.max())
p /= p.sum()
print("z          ", z)
print("closed form", p * (1 - p) * x1.sum())
print("z2         ", z2)
