"""Finite-difference verification suites for the differentiation machinery.

Each suite compares an exact derivative against a derivative-free oracle and
returns :class:`Check` records.  The oracles only evaluate forward values, so
a broken derivative rule cannot hide in both sides at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import forward as fw
from . import losses
from . import model as model_lib
from .ndarray import Rng

# (hidden widths, input dim, classes, trials)
SIZES = {
    "tiny": ((4,), 3, 3, 3),
    "small": ((12, 10), 5, 4, 6),
}


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def rel_err(a, b, floor: float = 1e-300) -> float:
    """||a - b|| / max(||b||, floor), 2-norm over all entries."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def mlp_arch(widths, n_in: int, n_out: int, act: str = "tanh") -> str:
    dims = [n_in, *widths, n_out]
    parts = []
    for i in range(len(dims) - 1):
        parts.append(f"dense({dims[i]},{dims[i + 1]})")
        if i < len(dims) - 2:
            parts.append(act)
    return ",".join(parts)


def random_net(rng: Rng, widths, n_in: int, n_out: int, act: str = "tanh"):
    net = model_lib.init(mlp_arch(widths, n_in, n_out, act), rng)
    # nonzero biases so bias paths are exercised
    for k in net.params:
        if k.endswith(".bias"):
            net.params[k] = rng.gaussian(net.params[k].shape, 0.0, 0.1)
    return net


def _perturbed(params, direction, t):
    return {k: params[k] + t * direction[k] for k in params}


def fd_gradient(f: Callable[[dict], float], params: dict, h: float = 1e-5) -> dict:
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            e = {kk: np.zeros_like(vv) for kk, vv in params.items()}
            e[k][idx] = 1.0
            g[idx] = (f(_perturbed(params, e, h)) - f(_perturbed(params, e, -h))) / (2 * h)
        out[k] = g
    return out


def flat(d: dict) -> np.ndarray:
    return np.concatenate([np.ravel(d[k]) for k in sorted(d)])


def _scalar_loss(net, x, y):
    def f(p):
        return float(losses.cross_entropy(net.logits(x, p), y).value)
    return f


# ---------------------------------------------------------------------------
# suites


def suite_reverse(rng: Rng, size: str = "small") -> list[Check]:
    widths, n_in, n_out, trials = SIZES[size]
    checks = []
    for t in range(trials):
        r = rng.child(t)
        for act in ("tanh", "relu"):
            net = random_net(r.child(0 if act == "tanh" else 1), widths, n_in, n_out, act)
            x = r.gaussian((4, n_in))
            y = r.integers(0, n_out, size=4)
            leaves = ad.leaves(net.params)
            g = ad.backward(losses.cross_entropy(net.forward(x, leaves), y), leaves)
            fd = fd_gradient(_scalar_loss(net, x, y), net.params)
            checks.append(Check("reverse", f"{act}-mlp-{t}", rel_err(flat(g), flat(fd)), 1e-5))
    return checks


def _random_direction(params, rng: Rng):
    return {k: rng.gaussian(v.shape) for k, v in params.items()}


def suite_forward(rng: Rng, size: str = "small") -> list[Check]:
    widths, n_in, n_out, trials = SIZES[size]
    checks = []
    for t in range(trials):
        r = rng.child(t)
        net = random_net(r.child(0), widths, n_in, n_out)
        x = r.gaussian((3, n_in))
        u = _random_direction(net.params, r.child(1))
        fn = lambda p: net.forward(x, p)  # noqa: E731
        g = lambda p: net.logits(x, p)  # noqa: E731
        _, j1 = fw.jvp(fn, net.params, u)
        h = 1e-5
        fd1 = (g(_perturbed(net.params, u, h)) - g(_perturbed(net.params, u, -h))) / (2 * h)
        checks.append(Check("jvp", f"tanh-mlp-{t}", rel_err(j1.value, fd1), 1e-4))
        _, _, j2 = fw.hvp_quadratic(fn, net.params, u)
        h = 1e-3
        fd2 = (g(_perturbed(net.params, u, h)) - 2 * g(net.params) + g(_perturbed(net.params, u, -h))) / h**2
        checks.append(Check("hvp", f"tanh-mlp-{t}", rel_err(j2.value, fd2), 1e-3))
    return checks


def taylor_remainder_ratio(net, x, u, floor: float = 1e-12) -> tuple[float, float]:
    """r(t) / r(t/2) at the smallest dyadic t whose r(t/2) still exceeds ``floor``.

    r(t) = ||g(w + t u) - g(w) - t g'u - t^2/2 u'g''u||.  Returns (ratio, t).
    """
    g0, g1, g2 = (v.value for v in fw.hvp_quadratic(lambda p: net.forward(x, p), net.params, u))

    def r(t):
        return float(np.linalg.norm(net.logits(x, _perturbed(net.params, u, t)) - (g0 + t * g1 + 0.5 * t * t * g2)))

    t = 1.0
    best = None
    for _ in range(60):
        lo = r(t / 2)
        if lo <= floor:
            break
        best = (r(t) / lo, t)
        t /= 2
    if best is None:
        return float("nan"), t
    return best


def suite_taylor(rng: Rng, size: str = "small", triples: int = 20) -> list[Check]:
    widths, n_in, n_out, _ = SIZES[size]
    checks = []
    for t in range(triples):
        r = rng.child(t)
        net = random_net(r.child(0), widths, n_in, n_out)
        x = r.gaussian((1, n_in))
        u = _random_direction(net.params, r.child(1))
        ratio, at = taylor_remainder_ratio(net, x, u)
        # distance from the [6, 10] band; 0 inside it
        err = 0.0 if 6.0 <= ratio <= 10.0 else min(abs(ratio - 6.0), abs(ratio - 10.0)) + 1.0
        checks.append(Check("taylor-remainder", f"triple-{t} ratio={ratio:.3f} t={at:.3g}",
                            err if np.isfinite(ratio) else float("inf"), 1.0))
    return checks


def final_layer_fd_rowsum(net, s, h: float = 1e-5, second: bool = False) -> np.ndarray:
    """Oracle for the row-sum vectors by differencing forward values only.

    First order: z_j = sum_i dp_j/dW[j, i] = directional derivative of p_j
    along the all-ones pattern on row j.  Second order: directional derivative
    of that row-sum along the all-ones matrix, by nested central differences.
    """
    wname = net.final_weight
    base = net.params

    def probs(p):
        logits = net.logits(np.asarray(s)[None], p)[0]
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def zvec(p, step):
        n = net.num_classes
        out = np.empty(n)
        for j in range(n):
            d = np.zeros_like(base[wname])
            d[j, :] = 1.0
            plus = dict(p, **{wname: p[wname] + step * d})
            minus = dict(p, **{wname: p[wname] - step * d})
            out[j] = (probs(plus)[j] - probs(minus)[j]) / (2 * step)
        return out

    if not second:
        return zvec(base, h)
    ones = np.ones_like(base[wname])
    plus = dict(base, **{wname: base[wname] + h * ones})
    minus = dict(base, **{wname: base[wname] - h * ones})
    return (zvec(plus, 1e-4) - zvec(minus, 1e-4)) / (2 * h)


def suite_row_sums(rng: Rng, size: str = "small") -> list[Check]:
    widths, n_in, n_out, trials = SIZES[size]
    checks = []
    for t in range(trials):
        r = rng.child(t)
        for depth, w in (("single", ()), ("two-layer", widths[:1])):
            net = random_net(r.child(len(w)), w, n_in, n_out)
            s = r.gaussian((n_in,))
            z = losses.gradrow_sum_vector(net, s).value
            checks.append(Check("row-sum", f"gradrow-{depth}-{t}",
                                 rel_err(z, final_layer_fd_rowsum(net, s)), 1e-5))
            z2 = losses.hessrow_sum_vector(net, s).value
            # the second-order sum vanishes for softmax outputs, so errors are
            # measured against the scale of the first-order vector
            fd2 = final_layer_fd_rowsum(net, s, h=1e-3, second=True)
            checks.append(Check("row-sum", f"hessrow-{depth}-{t}",
                                rel_err(z2, fd2, floor=np.linalg.norm(z)), 1e-3))
    return checks


def suite_double_backprop(rng: Rng, size: str = "small") -> list[Check]:
    """grad of sum(grad loss) against finite differences of the first gradient."""
    widths, n_in, n_out, trials = SIZES[size]
    checks = []
    for t in range(trials):
        r = rng.child(t)
        net = random_net(r.child(0), widths[:1], n_in, n_out)
        x = r.gaussian((2, n_in))
        y = r.integers(0, n_out, size=2)
        leaves = ad.leaves(net.params)
        g = ad.backward(losses.cross_entropy(net.forward(x, leaves), y), leaves, create_graph=True)
        h = ad.sum_(ad.stack([ad.sum_(v) for v in g.values()]))
        exact = ad.grad_of_scalar_grad(h, leaves)

        def hval(p):
            lv = ad.leaves(p)
            gg = ad.backward(losses.cross_entropy(net.forward(x, lv), y), lv)
            return float(sum(np.sum(v) for v in gg.values()))

        fd = fd_gradient(hval, net.params, h=1e-5)
        checks.append(Check("double-backprop", f"tanh-mlp-{t}", rel_err(flat(exact), flat(fd)), 1e-4))
    return checks


def objective_cases():
    for mode in losses.MODES:
        for est in losses.ESTIMATORS:
            yield mode, est


def suite_objective(rng: Rng, size: str = "small") -> list[Check]:
    widths, n_in, n_out, _ = SIZES[size]
    checks = []
    for i, (mode, est) in enumerate(objective_cases()):
        r = rng.child(i)
        net = random_net(r.child(0), widths[:1], n_in, n_out)
        s = r.gaussian((2, n_in))
        s_adv = s + r.uniform(s.shape, -0.1, 0.1)
        y = r.integers(0, n_out, size=2)
        cfg = losses.TaylorConfig(mode=mode, estimator=est, eta=0.2, sigma=0.5)
        seed = r.child(1).seed

        def f(p):
            return float(losses.total_objective(net, s, s_adv, y, cfg, p, Rng(seed))[0].value)

        leaves = ad.leaves(net.params)
        total, _ = losses.total_objective(net, s, s_adv, y, cfg, leaves, Rng(seed))
        g = ad.backward(total, leaves)
        fd = fd_gradient(f, net.params)
        checks.append(Check("objective", f"{mode}/{est}", rel_err(flat(g), flat(fd)), 1e-4))
    return checks


SUITES = {
    "reverse": suite_reverse,
    "forward": suite_forward,
    "taylor-remainder": suite_taylor,
    "row-sum": suite_row_sums,
    "double-backprop": suite_double_backprop,
    "objective": suite_objective,
}


def run_all(size: str = "small", seed: int = 0) -> dict[str, list[Check]]:
    root = Rng(seed)
    return {name: fn(root.child(i), size) for i, (name, fn) in enumerate(SUITES.items())}
