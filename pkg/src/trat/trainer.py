"""Outer minimisation: SGD with momentum over the robust objective."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as model_lib
from .attacks import AttackConfig, accuracy, attack_dataset, eval_attack, pgd
from .data import Dataset, augment
from .losses import TaylorConfig, sample_direction, total_objective
from .ndarray import Rng

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "clean_acc", "robust_acc", "attack",
                  "loss_zeroth", "loss_first", "loss_second", "wall_ms"]


def default_checkpoint_epochs(epochs: int = 200) -> list[int]:
    """Every epoch in 100-110 and 150-160, every fifth epoch in 110-150 and 160-200."""
    marks = set(range(100, 111)) | set(range(150, 161))
    marks |= set(range(110, 151, 5)) | set(range(160, 201, 5))
    return sorted(e for e in marks if e <= epochs)


@dataclass
class TrainConfig:
    arch: str = "mlp-moons"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drops: tuple[int, ...] = (100, 150)
    lr_factor: float = 0.1
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(loss_kind="kl_vs_clean"))
    taylor: TaylorConfig = field(default_factory=TaylorConfig)
    seed: int = 0
    checkpoint_epochs: tuple[int, ...] = tuple(default_checkpoint_epochs())
    eval_attacks: tuple[str, ...] = ("pgd20",)
    augment: bool | None = None  # None: augment image datasets only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        drops = tuple(self.lr_drops)
        if list(drops) != sorted(drops) or any(d < 1 or d > self.epochs for d in drops):
            raise ValueError(f"lr_drops {drops} must be sorted and within [1, {self.epochs}]")
        self.lr_drops = drops
        self.checkpoint_epochs = tuple(e for e in self.checkpoint_epochs if 1 <= e <= self.epochs)
        self.eval_attacks = tuple(self.eval_attacks)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_factor ** sum(1 for d in cfg.lr_drops if d <= epoch)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    clean_acc: float
    robust_acc: float | None = None
    attack: str = ""
    loss_zeroth: float | None = None
    loss_first: float | None = None
    loss_second: float | None = None
    wall_ms: float = 0.0

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.epoch), self.split, fmt(self.clean_acc), fmt(self.robust_acc), self.attack,
                fmt(self.loss_zeroth), fmt(self.loss_first), fmt(self.loss_second),
                f"{self.wall_ms:.3f}"]


class NumericAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> tuple[dict, dict]:
    """v <- momentum * v + (g + wd * w);  w <- w - lr * v.  Returns new (params, velocity)."""
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"missing gradients for {sorted(missing)}")
    new_p, new_v = {}, {}
    for k, w in params.items():
        v = momentum * velocity.get(k, np.zeros_like(w)) + (grads[k] + weight_decay * w)
        new_v[k] = v
        new_p[k] = w - lr * v
    return new_p, new_v


def write_metrics(rows: Iterable[MetricsRow], path, append: bool = False) -> None:
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if not exists:
            w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[MetricsRow]:
    def num(v):
        return None if v == "" else float(v)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [MetricsRow(int(r["epoch"]), r["split"], num(r["clean_acc"]), num(r["robust_acc"]),
                           r["attack"], num(r["loss_zeroth"]), num(r["loss_first"]),
                           num(r["loss_second"]), float(r["wall_ms"])) for r in reader]


def evaluate(net, ds: Dataset, attacks: Sequence[str], base: AttackConfig, seed: int = 0,
             epoch: int = 0, batch_size: int = 256) -> list[MetricsRow]:
    """Clean accuracy plus robust accuracy per named attack (evaluated at u = 0)."""
    t0 = time.perf_counter()
    clean = accuracy(net, ds.inputs, ds.labels, batch_size)
    if not attacks:
        return [MetricsRow(epoch, ds.split, clean, wall_ms=1e3 * (time.perf_counter() - t0))]
    rows = []
    rng = Rng(seed)
    for i, name in enumerate(attacks):
        cfg = eval_attack(name, base)
        adv = attack_dataset(net, ds.inputs, ds.labels, cfg, rng.child(i), batch_size)
        rows.append(MetricsRow(epoch, ds.split, clean, accuracy(net, adv, ds.labels, batch_size), name,
                               wall_ms=1e3 * (time.perf_counter() - t0)))
    return rows


def select_best(rows: Iterable[MetricsRow], attack: str = "pgd20", split: str = "test") -> MetricsRow | None:
    """Checkpoint row with the highest robust accuracy (earliest epoch on ties)."""
    best = None
    for r in rows:
        if r.split != split or r.attack != attack or r.robust_acc is None:
            continue
        if best is None or r.robust_acc > best.robust_acc:
            best = r
    return best


@dataclass
class TrainResult:
    net: model_lib.Network
    metrics: list[MetricsRow]
    checkpoints: dict[int, str]

    def best(self, attack: str = "pgd20") -> MetricsRow | None:
        return select_best(self.metrics, attack)


def train(train_ds: Dataset, cfg: TrainConfig, test_ds: Dataset | None = None, out_dir=None,
          net: model_lib.Network | None = None) -> TrainResult:
    root = Rng(cfg.seed)
    # independent streams so switching the Taylor mode leaves data order untouched
    init_rng, shuffle_rng, attack_rng, noise_rng, mc_rng, aug_rng, eval_rng = (root.child(i) for i in range(7))
    if net is None:
        net = model_lib.init(cfg.arch, init_rng)
    if test_ds is not None and test_ds.split != "test":
        test_ds = replace(test_ds, split="test")
    params = {k: v.copy() for k, v in net.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    use_aug = train_ds.is_image if cfg.augment is None else cfg.augment
    taylor = cfg.taylor
    perturb = taylor.use_first and taylor.sigma > 0
    metrics: list[MetricsRow] = []
    checkpoints: dict[int, str] = {}
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics([], metrics_path)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        ds = train_ds.shuffled(shuffle_rng.child(epoch))
        sums = np.zeros(3)
        n_seen = n_clean = n_robust = 0
        for b, (s, y) in enumerate(ds.batches(cfg.batch_size)):
            step += 1
            if use_aug:
                s = augment(s, aug_rng.child(step))
            net.params = params
            attack_params = params
            if perturb:
                u = sample_direction(params, taylor.sigma, noise_rng.child(step))
                attack_params = {k: params[k] + u[k] for k in params}
            s_adv = pgd(net, s, y, cfg.attack, attack_rng.child(step), params=attack_params)

            leaves = ad.leaves(params)
            total, parts = total_objective(net, s, s_adv, y, taylor, leaves, rng=mc_rng.child(step))
            value = float(total.value)
            if not math.isfinite(value):
                raise NumericAbort(epoch, b, value)
            grads = ad.backward(total, leaves)

            k = len(y)
            n_seen += k
            n_clean += int(np.sum(np.argmax(net.logits(s), axis=1) == y))
            n_robust += int(np.sum(np.argmax(net.logits(s_adv), axis=1) == y))
            sums += k * np.array([parts["zeroth"], parts["first"], parts["second"]])
            params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
        net.params = params
        z, f1, f2 = (float(v) for v in sums / n_seen)
        epoch_rows = [MetricsRow(epoch, "train", n_clean / n_seen, n_robust / n_seen,
                                 f"train-pgd{cfg.attack.steps}", z, f1, f2,
                                 1e3 * (time.perf_counter() - t0))]
        if epoch in cfg.checkpoint_epochs or epoch == cfg.epochs:
            if out_dir is not None:
                path = os.path.join(out_dir, f"epoch{epoch:04d}.ckpt")
                model_lib.save(net, path)
                checkpoints[epoch] = path
            if test_ds is not None:
                base = replace(cfg.attack, loss_kind="cross_entropy")
                epoch_rows += evaluate(net, test_ds, cfg.eval_attacks, base, eval_rng.child(epoch).seed, epoch)
        metrics += epoch_rows
        if metrics_path is not None:
            write_metrics(epoch_rows, metrics_path, append=True)
        log.info("epoch %d lr %.4g loss %.4f/%.4f/%.4f clean %.3f", epoch, lr, z, f1, f2, n_clean / n_seen)

    if out_dir is not None:
        final = os.path.join(out_dir, "final.ckpt")
        model_lib.save(net, final)
    return TrainResult(net, metrics, checkpoints)
