"""Loss-surface probes: input-space grids and weight-space sharpness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as model_lib
from .losses import cross_entropy, cross_entropy_rows
from .ndarray import Rng


@dataclass
class LandscapeGrid:
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # [len(xs), len(ys)]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        self.loss = np.asarray(self.loss, dtype=np.float64)
        if self.loss.shape != (len(self.xs), len(self.ys)):
            raise ValueError(f"loss grid {self.loss.shape} does not match axes ({len(self.xs)}, {len(self.ys)})")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("# meta " + " ".join(f"{k}={v}" for k, v in self.meta.items()) + "\n")
            f.write("x,y,loss\n")
            for i, x in enumerate(self.xs):
                for j, y in enumerate(self.ys):
                    f.write(f"{x:.17g},{y:.17g},{self.loss[i, j]:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "LandscapeGrid":
        meta = {}
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("# meta"):
                    for item in line[len("# meta"):].split():
                        k, _, v = item.partition("=")
                        meta[k] = v
                elif line and line != "x,y,loss":
                    rows.append([float(t) for t in line.split(",")])
        arr = np.array(rows)
        xs = np.array(list(dict.fromkeys(arr[:, 0])))
        ys = np.array(list(dict.fromkeys(arr[:, 1])))
        loss = arr[:, 2].reshape(len(xs), len(ys))
        return cls(xs, ys, loss, meta)


def checkpoint_hash(net) -> str:
    return hashlib.sha256(model_lib.to_bytes(net)).hexdigest()[:16]


def _loss_at(net, s: np.ndarray, y: int) -> float:
    with ad.no_grad():
        return float(cross_entropy(net.forward(s[None]), np.array([y])).value)


def input_surface(net, s, y: int, xs: Sequence[float] | None = None, ys: Sequence[float] | None = None,
                  seed: int = 0, clamp_range: tuple[float, float] | None = None) -> LandscapeGrid:
    """Cross-entropy at s + a*sign(grad_s L) + b*r over the (a, b) grid, r ~ Rademacher(0.5)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != net.input_ndim:
        raise ValueError(f"input has shape {s.shape}; network expects a single {net.input_ndim}-d input")
    xs = np.linspace(-0.1, 0.1, 41) if xs is None else np.asarray(xs, dtype=np.float64)
    ys = np.linspace(-0.1, 0.1, 41) if ys is None else np.asarray(ys, dtype=np.float64)
    if len(xs) < 2 or len(ys) < 2:
        raise ValueError("grid needs at least two steps per axis")
    x_var = ad.Var(s[None])
    g = ad.backward(cross_entropy(net.forward(x_var), np.array([y])), [x_var])[0][0]
    d1 = np.sign(g)
    d2 = Rng(seed).rademacher(s.shape)
    loss = np.empty((len(xs), len(ys)))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            p = s + a * d1 + b * d2
            if clamp_range is not None:
                p = np.clip(p, *clamp_range)
            loss[i, j] = _loss_at(net, p, y)
    meta = {"seed": seed, "checkpoint": checkpoint_hash(net),
            "dir1_norm": f"{np.linalg.norm(d1):.17g}", "dir2_norm": f"{np.linalg.norm(d2):.17g}"}
    return LandscapeGrid(xs, ys, loss, meta)


def clean_loss(net, s, y: int) -> float:
    return _loss_at(net, np.asarray(s, dtype=np.float64), y)


def sharpness(loss_fn: Callable[[Mapping[str, np.ndarray]], float], params: Mapping[str, np.ndarray],
              sigma: float, n_samples: int, rng: Rng, noise: Sequence[Mapping[str, np.ndarray]] | None = None) -> dict:
    """Statistics of loss_fn(w + u) - loss_fn(w) over u ~ N(0, sigma^2 I).

    ``noise`` supplies the perturbations explicitly instead of sampling them.
    """
    if noise is None:
        if sigma <= 0 or n_samples < 1:
            raise ValueError("sigma must be > 0 and n_samples >= 1")
        noise = [{k: rng.gaussian(np.shape(v), 0.0, sigma) for k, v in params.items()}
                 for _ in range(n_samples)]
    base = loss_fn(params)
    inc = np.array([loss_fn({k: params[k] + u[k] for k in params}) - base for u in noise])
    return {"mean_increase": float(inc.mean()), "max_increase": float(inc.max()),
            "std_increase": float(inc.std()), "base_loss": float(base), "n_samples": len(inc)}


def weight_sharpness(net, x, y, sigma: float = 0.01, n_samples: int = 200, seed: int = 0,
                     noise=None) -> dict:
    """Mean / max cross-entropy increase of ``net`` under Gaussian weight noise on a fixed batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def loss_fn(p):
        with ad.no_grad():
            return float(np.mean(cross_entropy_rows(net.forward(x, p), y).value))

    return sharpness(loss_fn, net.params, sigma, n_samples, Rng(seed), noise)
