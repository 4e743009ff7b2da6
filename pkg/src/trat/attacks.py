"""Inner maximisation: FGSM / PGD-K under l-inf and l2, with CW-margin variant."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .losses import calibrated_loss_rows, cross_entropy_rows
from .ndarray import Rng

NORMS = ("linf", "l2")
LOSS_KINDS = ("cross_entropy", "kl_vs_clean", "cw_margin")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    loss_kind: str = "cross_entropy"
    random_start_std: float = 0.001
    clamp_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps >= 1 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when steps >= 1")
        if self.clamp_range is not None:
            lo, hi = self.clamp_range
            if lo > hi:
                raise ValueError(f"clamp_range {self.clamp_range} is empty")

    @classmethod
    def l2_default(cls, **kw) -> "AttackConfig":
        return cls(norm="l2", epsilon=128 / 255, step_size=15 / 255, **kw)


def _norms(delta: np.ndarray, batched: bool) -> np.ndarray:
    if not batched:
        return np.sqrt(np.sum(delta * delta))
    axes = tuple(range(1, delta.ndim))
    return np.sqrt(np.sum(delta * delta, axis=axes, keepdims=True))


def project(delta, norm: str, epsilon: float, batched: bool = False) -> np.ndarray:
    """Project onto the epsilon ball (per sample along axis 0 when ``batched``)."""
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        n = _norms(delta, batched)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(n > epsilon, epsilon / n, 1.0)
        return delta * scale
    raise ValueError(f"unknown norm {norm!r}")


def cw_margin_rows(logits, y) -> ad.Var:
    """max_{j != y} logit_j - logit_y per row (kappa = 0)."""
    logits = ad.const(logits)
    single = logits.ndim == 1
    if single:
        logits = ad.reshape(logits, (1, -1))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if logits.shape[1] < 2:
        raise ValueError("cw margin needs at least two classes")
    rows = np.arange(logits.shape[0])
    masked = logits.value.copy()
    masked[rows, y] = -np.inf
    other = np.argmax(masked, axis=1)
    out = ad.sub(ad.getitem(logits, (rows, other)), ad.getitem(logits, (rows, y)))
    return ad.getitem(out, 0) if single else out


def cw_margin_loss(logits, y) -> float:
    return float(np.sum(cw_margin_rows(logits, y).value))


def _attack_loss(net, x: ad.Var, y, cfg: AttackConfig, params, clean_logits):
    logits = net.forward(x, params)
    if cfg.loss_kind == "cross_entropy":
        rows = cross_entropy_rows(logits, y)
    elif cfg.loss_kind == "kl_vs_clean":
        rows = calibrated_loss_rows(clean_logits, logits)
    else:
        rows = cw_margin_rows(logits, y)
    return ad.sum_(rows)


def input_gradient(net, s_adv, y, cfg: AttackConfig, params=None, clean_logits=None) -> np.ndarray:
    x = ad.Var(s_adv)
    loss = _attack_loss(net, x, y, cfg, net.params if params is None else params, clean_logits)
    return ad.backward(loss, [x])[0]


def pgd(net, s, y, cfg: AttackConfig, rng: Rng | None = None,
        params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Batched PGD-K from a small Gaussian start; returns adversarial inputs.

    ``params`` overrides the network weights (e.g. ``w + u`` during training).
    For ``kl_vs_clean`` the clean output at those weights is the fixed target.
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == net.input_ndim
    if single:
        s = s[None]
    params = net.params if params is None else params
    rng = rng if rng is not None else Rng(0)
    y = None if y is None else np.atleast_1d(np.asarray(y, dtype=np.int64))
    clean_logits = None
    if cfg.loss_kind == "kl_vs_clean":
        clean_logits = net.logits(s, params)

    def clamp(delta):
        if cfg.clamp_range is None:
            return delta
        return np.clip(s + delta, *cfg.clamp_range) - s

    delta = rng.gaussian(s.shape, 0.0, cfg.random_start_std)
    delta = clamp(project(delta, cfg.norm, cfg.epsilon, batched=True))
    for _ in range(cfg.steps):
        g = input_gradient(net, s + delta, y, cfg, params, clean_logits)
        if cfg.norm == "linf":
            step = np.sign(g)
        else:
            n = _norms(g, batched=True)
            step = np.divide(g, n, out=np.zeros_like(g), where=n > 0)
        delta = clamp(project(delta + cfg.step_size * step, cfg.norm, cfg.epsilon, batched=True))
    out = s + delta
    if cfg.clamp_range is not None:
        out = np.clip(out, *cfg.clamp_range)
    return out[0] if single else out


def fgsm(net, s, y, cfg: AttackConfig, rng: Rng | None = None, params=None) -> np.ndarray:
    return pgd(net, s, y, replace(cfg, steps=1, step_size=cfg.epsilon), rng, params)


_EVAL_NAME = re.compile(r"^(fgsm|pgd|cw)(\d*)$")


def eval_attack(name: str, base: AttackConfig) -> AttackConfig:
    """Named evaluation attacks: ``fgsm``, ``pgd<K>``, ``cw<K>`` (CW margin by PGD)."""
    m = _EVAL_NAME.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown attack {name!r}; expected fgsm, pgdK or cwK")
    kind, k = m.groups()
    if kind == "fgsm":
        return replace(base, steps=1, step_size=base.epsilon, loss_kind="cross_entropy")
    steps = int(k) if k else 20
    return replace(base, steps=steps, loss_kind="cw_margin" if kind == "cw" else "cross_entropy")


def attack_dataset(net, x, y, cfg: AttackConfig, rng: Rng, batch_size: int = 256,
                   source=None) -> np.ndarray:
    """Attack every row of ``x`` in batches.  ``source`` crafts the examples (transfer)."""
    source = net if source is None else source
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    for b, start in enumerate(range(0, len(x), batch_size)):
        sl = slice(start, start + batch_size)
        out[sl] = pgd(source, x[sl], y[sl], cfg, rng.child(b))
    return out


def accuracy(net, x, y, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        correct += int(np.sum(net.predict(x[sl]) == y[sl]))
    return correct / len(x)


def transfer_eval(surrogate, target, x, y, cfg: AttackConfig, rng: Rng, batch_size: int = 256) -> dict:
    """Black-box protocol: craft on ``surrogate``, score on ``target``."""
    def inputs(net):
        first = net.layers[0]
        return getattr(first, "in_features", None), getattr(first, "in_channels", None)

    if inputs(surrogate) != inputs(target) or surrogate.num_classes != target.num_classes:
        raise ValueError("surrogate and target disagree on input or output dimensions")
    adv = attack_dataset(target, x, y, cfg, rng, batch_size, source=surrogate)
    return {
        "clean_acc": accuracy(target, x, y, batch_size),
        "robust_acc": accuracy(target, adv, y, batch_size),
        "n": int(len(x)),
    }
