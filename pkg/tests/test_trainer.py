import math

import numpy as np
import pytest

from trat import model as m
from trat.attacks import AttackConfig
from trat.data import two_moons
from trat.losses import TaylorConfig
from trat.ndarray import Rng
from trat.trainer import (METRICS_HEADER, MetricsRow, NumericAbort, TrainConfig, evaluate, lr_at,
                          default_checkpoint_epochs, read_metrics, select_best, sgd_step, train, write_metrics)

from .conftest import MOONS_ATTACK


def test_plain_gradient_step():
    p, v = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, {}, lr=1.0, momentum=0.0)
    assert p["w"].tolist() == [0.5, 3.0]


def test_zero_grad_zero_velocity_is_still():
    w = np.array([1.0, -2.0])
    p, v = sgd_step({"w": w}, {"w": np.zeros(2)}, {"w": np.zeros(2)}, lr=0.1, momentum=0.9)
    assert np.array_equal(p["w"], w)
    p, _ = sgd_step({"w": w}, {"w": np.zeros(2)}, {"w": np.ones(2)}, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p["w"], w - 0.1 * 0.9)


def test_momentum_recursion_on_quadratic():
    # f = w^2 / 2, grad = w; v1 = w0, w1 = w0 - lr v1; v2 = 0.9 v1 + w1, w2 = w1 - lr v2
    w0 = 1.0
    v1 = w0
    w1 = w0 - 0.1 * v1
    v2 = 0.9 * v1 + w1
    w2 = w1 - 0.1 * v2
    p, v = {"w": np.array(w0)}, {}
    for _ in range(2):
        p, v = sgd_step(p, {"w": p["w"].copy()}, v, lr=0.1, momentum=0.9)
    assert float(p["w"]) == w2 == pytest.approx(0.72)


def test_weight_decay_term():
    p, v = sgd_step({"w": np.array(2.0)}, {"w": np.array(0.0)}, {}, lr=1.0, momentum=0.0, weight_decay=0.5)
    assert float(p["w"]) == 1.0


def test_missing_gradient_rejected():
    with pytest.raises(ValueError):
        sgd_step({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.zeros(1)}, {}, 0.1)


def test_lr_schedule_table():
    cfg = TrainConfig()
    table = {1: 0.1, 99: 0.1, 100: 0.01, 149: 0.01, 150: 0.001, 200: 0.001}
    for epoch, lr in table.items():
        assert lr_at(cfg, epoch) == pytest.approx(lr, rel=1e-15)


def test_default_checkpoint_epochs():
    e = default_checkpoint_epochs()
    assert e[:11] == list(range(100, 111))
    assert set(range(150, 161)) <= set(e)
    assert {115, 120, 145, 165, 200} <= set(e) and 112 not in e and 163 not in e


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_drops=(5, 3))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_drops=(11,))


def _small_cfg(**kw):
    base = dict(arch="dense(2,8),tanh,dense(8,2)", epochs=2, batch_size=32, lr_drops=(), checkpoint_epochs=(1,),
                attack=AttackConfig(epsilon=0.1, step_size=0.05, steps=2, loss_kind="kl_vs_clean"),
                taylor=TaylorConfig(mode="zeroth+first+second", sigma=0.01), eval_attacks=("pgd5",), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_keeps_initial_weights():
    ds = two_moons(64, 0.1, 0)
    cfg = _small_cfg(epochs=1, lr=0.0)
    init = m.init(cfg.arch, Rng(cfg.seed).child(0))
    res = train(ds, cfg)
    for k in init.params:
        assert res.net.params[k].tobytes() == init.params[k].tobytes()


def test_zeroth_mode_ignores_sigma():
    ds = two_moons(64, 0.1, 0)
    a = train(ds, _small_cfg(taylor=TaylorConfig(mode="zeroth", sigma=0.01)))
    b = train(ds, _small_cfg(taylor=TaylorConfig(mode="zeroth", sigma=0.5)))
    la = [r.loss_zeroth for r in a.metrics if r.split == "train"]
    lb = [r.loss_zeroth for r in b.metrics if r.split == "train"]
    assert la == lb
    assert all(a.net.params[k].tobytes() == b.net.params[k].tobytes() for k in a.net.params)


def test_artifacts_and_determinism(tmp_path):
    ds = two_moons(80, 0.1, 0)
    test_ds = two_moons(40, 0.1, 1)
    r1 = train(ds, _small_cfg(), test_ds, out_dir=tmp_path / "a")
    train(ds, _small_cfg(), test_ds, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "epoch0001.ckpt").exists()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [r.split for r in rows] == ["train", "test", "train", "test"]
    assert all(0.0 <= r.clean_acc <= 1.0 for r in rows)
    assert len(r1.metrics) == 4
    first = (tmp_path / "a" / "metrics.csv").read_bytes().split(b"\n")[0]
    assert first == ",".join(METRICS_HEADER).encode()
    assert b"\r" not in (tmp_path / "a" / "metrics.csv").read_bytes()


def test_nan_aborts_with_coordinates():
    ds = two_moons(64, 0.1, 0)
    net = m.init("dense(2,8),tanh,dense(8,2)", Rng(0))
    net.params["l2.bias"] = np.array([np.nan, 0.0])
    with pytest.raises(NumericAbort) as e:
        train(ds, _small_cfg(), net=net)
    assert (e.value.epoch, e.value.batch) == (1, 0)


def test_untrained_net_is_near_chance():
    ds = two_moons(2000, 0.1, 4)
    net = m.init("mlp-moons", Rng(123))
    (row,) = evaluate(net, ds, [], MOONS_ATTACK)
    # a random classifier on balanced data; the bound is loose because a random
    # net is not a coin flip per point, it splits the plane
    assert 0.5 - 0.35 <= row.clean_acc <= 0.5 + 0.35


def test_eps_zero_robust_equals_clean(trained_moons, moons_split):
    _, te = moons_split
    base = AttackConfig(epsilon=0.0, step_size=0.01, steps=3)
    (row,) = evaluate(trained_moons, te, ["pgd20"], base)
    assert row.robust_acc == row.clean_acc


def test_empty_attack_list_is_clean_only(trained_moons, moons_split):
    _, te = moons_split
    rows = evaluate(trained_moons, te, [], MOONS_ATTACK)
    assert len(rows) == 1 and rows[0].robust_acc is None and rows[0].attack == ""


def test_evaluate_is_deterministic(trained_moons, moons_split):
    _, te = moons_split
    a = evaluate(trained_moons, te, ["pgd10", "cw10"], MOONS_ATTACK, seed=4)
    b = evaluate(trained_moons, te, ["pgd10", "cw10"], MOONS_ATTACK, seed=4)
    assert [(r.clean_acc, r.robust_acc) for r in a] == [(r.clean_acc, r.robust_acc) for r in b]


def test_select_best_prefers_robustness():
    rows = [MetricsRow(100, "test", 0.99, 0.80, "pgd20"), MetricsRow(105, "test", 0.97, 0.85, "pgd20"),
            MetricsRow(110, "test", 0.98, 0.85, "pgd20"), MetricsRow(110, "train", 1.0, 0.99, "pgd20")]
    best = select_best(rows)
    assert (best.epoch, best.clean_acc) == (105, 0.97)


def test_metrics_round_trip(tmp_path):
    rows = [MetricsRow(1, "train", 0.5, 0.25, "train-pgd10", 0.1, 0.2, math.pi, 12.5),
            MetricsRow(1, "test", 0.75)]
    write_metrics(rows, tmp_path / "m.csv")
    back = read_metrics(tmp_path / "m.csv")
    assert back[0] == MetricsRow(1, "train", 0.5, 0.25, "train-pgd10", 0.1, 0.2, math.pi, 12.5)
    assert back[1].robust_acc is None
