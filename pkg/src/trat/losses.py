"""Robust training objectives: TRADES term plus first/second-order noise terms.

Two estimators are provided for the noise terms.  ``monte_carlo`` samples
weight noise ``u`` and pushes it through the network in forward mode
(``g'(w)^T u`` and ``u^T g''(w) u``).  ``appendix_d`` replaces the expectation
with deterministic row sums of first and second derivatives of the softmax
output with respect to the final weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import forward as fw
from .autodiff import Var
from .ndarray import Rng

MODES = ("zeroth", "zeroth+first", "zeroth+first+second")
ESTIMATORS = ("appendix_d", "monte_carlo")


@dataclass
class TaylorConfig:
    lambda_inv: float = 6.0
    eta: float | None = None  # None -> 0.3 for zeroth+first, 0.2 for zeroth+first+second
    sigma: float = 0.01
    mc_samples: int = 1
    mode: str = "zeroth+first+second"
    estimator: str = "appendix_d"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.eta is None:
            self.eta = {"zeroth": 0.0, "zeroth+first": 0.3, "zeroth+first+second": 0.2}[self.mode]
        if self.sigma < 0 or self.eta < 0 or self.lambda_inv < 0:
            raise ValueError("sigma, eta and lambda_inv must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @property
    def use_first(self) -> bool:
        return self.mode != "zeroth"

    @property
    def use_second(self) -> bool:
        return self.mode == "zeroth+first+second"


# ---------------------------------------------------------------------------
# basic losses


def log_softmax(x) -> Var:
    x = ad.const(x)
    shift = ad.Var(np.max(x.value, axis=-1, keepdims=True))
    z = ad.sub(x, ad.broadcast_to(shift, x.shape))
    lse = ad.log(ad.sum_(ad.exp(z), axis=-1, keepdims=True))
    return ad.sub(z, ad.broadcast_to(lse, x.shape))


def softmax(x) -> Var:
    return ad.exp(log_softmax(x))


def calibrated_loss_rows(a, b) -> Var:
    """-sum_j softmax(a)_j log softmax(b)_j along the last axis."""
    a, b = ad.const(a), ad.const(b)
    if a.shape != b.shape:
        raise ValueError(f"calibrated_loss: shapes {a.shape} and {b.shape} differ")
    return ad.neg(ad.sum_(ad.mul(softmax(a), log_softmax(b)), axis=-1))


def calibrated_loss(a, b) -> Var:
    """Softmax cross-entropy between two score vectors, averaged over rows.

    Gradients flow through both arguments.
    """
    rows = calibrated_loss_rows(a, b)
    return rows if rows.ndim == 0 else ad.mul(1.0 / rows.size, ad.sum_(rows))


def onehot(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros(y.shape + (n,))
    np.put_along_axis(out, y[..., None], 1.0, axis=-1)
    return out


def cross_entropy_rows(logits, y) -> Var:
    logits = ad.const(logits)
    return ad.neg(ad.sum_(ad.mul(onehot(y, logits.shape[-1]), log_softmax(logits)), axis=-1))


def cross_entropy(logits, y) -> Var:
    rows = cross_entropy_rows(logits, y)
    return rows if rows.ndim == 0 else ad.mul(1.0 / rows.size, ad.sum_(rows))


def entropy(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def generalized_kl(a, b) -> float:
    """sum_j a_j log(a_j / b_j) - a_j + b_j for non-negative vectors (0 log 0 = 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    return float(np.sum(t - a + b))


# ---------------------------------------------------------------------------
# objective terms


def _params(net, params):
    return net.params if params is None else params


def trades_zeroth(net, s, s_adv, y, lambda_inv: float, params=None) -> Var:
    """Clean cross-entropy + lambda_inv * L(logits(s), logits(s_adv)), batch mean."""
    params = _params(net, params)
    clean = net.forward(s, params)
    adv = net.forward(s_adv, params)
    loss = cross_entropy(clean, y)
    if lambda_inv == 0:
        return loss
    return ad.add(loss, ad.mul(float(lambda_inv), calibrated_loss(clean, adv)))


def _pair_batch(s, s_adv):
    s = np.asarray(s, dtype=np.float64)
    s_adv = np.asarray(s_adv, dtype=np.float64)
    single = False
    if s.ndim in (1, 3):
        s, s_adv, single = s[None], s_adv[None], True
    return np.concatenate([s, s_adv], axis=0), s.shape[0], single


def sample_direction(params: Mapping[str, object], sigma: float, rng: Rng) -> dict:
    """u ~ N(0, sigma^2 I) over every parameter (weights and biases)."""
    return {k: rng.gaussian(np.shape(v.value if isinstance(v, Var) else v), 0.0, sigma)
            for k, v in params.items()}


def _taylor_coeff_loss(net, s, s_adv, params, directions, order: int) -> Var:
    both, n, _ = _pair_batch(s, s_adv)
    fn = lambda p: net.forward(both, p)  # noqa: E731
    total = None
    for u in directions:
        if order == 1:
            _, c = fw.jvp(fn, params, u)
        else:
            _, _, c = fw.hvp_quadratic(fn, params, u)
        term = calibrated_loss(ad.getitem(c, slice(0, n)), ad.getitem(c, slice(n, 2 * n)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(1.0 / len(directions), total)


def first_term_mc(net, s, s_adv, cfg: TaylorConfig, rng: Rng | None = None, params=None,
                  directions=None) -> Var:
    """eta * E_u L(g'(w)^T u on s, g'(w)^T u on s_adv)."""
    params = _params(net, params)
    if directions is None:
        directions = [sample_direction(params, cfg.sigma, rng) for _ in range(cfg.mc_samples)]
    return ad.mul(float(cfg.eta), _taylor_coeff_loss(net, s, s_adv, params, directions, 1))


def second_term_mc(net, s, s_adv, cfg: TaylorConfig, rng: Rng | None = None, params=None,
                   directions=None) -> Var:
    """(eta / 2) * E_u L(u^T g''(w) u on s, u^T g''(w) u on s_adv)."""
    params = _params(net, params)
    if directions is None:
        directions = [sample_direction(params, cfg.sigma, rng) for _ in range(cfg.mc_samples)]
    return ad.mul(float(cfg.eta) / 2.0, _taylor_coeff_loss(net, s, s_adv, params, directions, 2))


def _row_sums(net, s, params, second: bool, prob_fn=None) -> Var:
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == net.input_ndim
    if single:
        s = s[None]
    logits, w_exp = net.forward(s, params, per_sample_final=True)
    p = (prob_fn or softmax)(logits)
    n = net.num_classes
    zs = []
    for j in range(n):
        gj = ad.backward(ad.sum_(ad.getitem(p, (slice(None), j))), [w_exp], create_graph=True)[0]
        zs.append(ad.sum_(ad.getitem(gj, (slice(None), j)), axis=1))
    z = ad.stack(zs, axis=1)
    if second:
        z2 = []
        for l in range(n):
            h = ad.sum_(ad.getitem(z, (slice(None), l)))
            gl = ad.grad_of_scalar_grad(h, [w_exp], create_graph=True, allow_unused=True)[0]
            z2.append(ad.sum_(gl, axis=(1, 2)))
        z = ad.stack(z2, axis=1)
    if single:
        z = ad.getitem(z, 0)
    return z


def gradrow_sum_vector(net, s, params=None, prob_fn=None) -> Var:
    """z_j = sum_i d p_j / d W[j, i] over the final weight matrix, per sample.

    ``prob_fn`` replaces the softmax map from logits to outputs (tests use an
    affine stub).  The result stays on the graph for further differentiation.
    """
    return _row_sums(net, s, _params(net, params), second=False, prob_fn=prob_fn)


def hessrow_sum_vector(net, s, params=None, prob_fn=None) -> Var:
    """z2_l = sum_{j,k} d/dW[j, k] (sum_i d p_l / d W[l, i]) via double backprop."""
    return _row_sums(net, s, _params(net, params), second=True, prob_fn=prob_fn)


def _surrogate(net, s, s_adv, params, second: bool) -> Var:
    fn = hessrow_sum_vector if second else gradrow_sum_vector
    z_s, z_a = fn(net, s, params), fn(net, s_adv, params)
    clean = net.forward(s, params)
    adv = net.forward(s_adv, params)
    left = calibrated_loss(adv, ad.sub(z_s, z_a))
    right = calibrated_loss(clean, ad.sub(z_a, z_s))
    return ad.mul(0.5, ad.add(left, right))


def first_term_appendix_d(net, s, s_adv, cfg: TaylorConfig, params=None) -> Var:
    return ad.mul(float(cfg.eta), _surrogate(net, s, s_adv, _params(net, params), second=False))


def second_term_appendix_d(net, s, s_adv, cfg: TaylorConfig, params=None) -> Var:
    return ad.mul(float(cfg.eta) / 2.0, _surrogate(net, s, s_adv, _params(net, params), second=True))


def total_objective(net, s, s_adv, y, cfg: TaylorConfig, params=None, rng: Rng | None = None):
    """Batch-mean objective and its ``{zeroth, first, second}`` components.

    Terms whose weight is zero are not built at all, so ``eta = 0`` reproduces
    the zeroth-order (TRADES) objective bit for bit.
    """
    params = _params(net, params)
    total = trades_zeroth(net, s, s_adv, y, cfg.lambda_inv, params)
    parts = {"zeroth": float(total.value), "first": 0.0, "second": 0.0}
    if cfg.eta == 0 or not cfg.use_first:
        return total, parts
    directions = None
    if cfg.estimator == "monte_carlo":
        if rng is None:
            raise ValueError("monte_carlo estimator needs an rng")
        directions = [sample_direction(params, cfg.sigma, rng) for _ in range(cfg.mc_samples)]
        first = first_term_mc(net, s, s_adv, cfg, params=params, directions=directions)
    else:
        first = first_term_appendix_d(net, s, s_adv, cfg, params)
    total = ad.add(total, first)
    parts["first"] = float(first.value)
    if cfg.use_second:
        if cfg.estimator == "monte_carlo":
            second = second_term_mc(net, s, s_adv, cfg, params=params, directions=directions)
        else:
            second = second_term_appendix_d(net, s, s_adv, cfg, params)
        total = ad.add(total, second)
        parts["second"] = float(second.value)
    return total, parts
