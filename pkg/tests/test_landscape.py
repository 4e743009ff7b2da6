import numpy as np
import pytest

from trat import model as m
from trat.landscape import LandscapeGrid, clean_loss, input_surface, sharpness, weight_sharpness
from trat.ndarray import Rng


def _linear_net():
    w = np.array([[1.5, -0.5], [-0.2, 0.7]])
    return m.Network("dense(2,2)", {"l0.weight": w, "l0.bias": np.array([0.1, -0.1])})


def test_origin_is_clean_loss():
    net = m.init("mlp-moons", Rng(0))
    s = np.array([0.3, -0.2])
    g = input_surface(net, s, 1, xs=np.linspace(-0.1, 0.1, 5), ys=np.linspace(-0.1, 0.1, 5))
    assert g.loss[2, 2] == clean_loss(net, s, 1)


def test_linear_model_rises_along_gradient_sign():
    net = _linear_net()
    g = input_surface(net, np.array([0.4, 0.1]), 0, xs=np.linspace(-0.5, 0.5, 21), ys=[-0.1, 0.0])
    col = g.loss[:, 1]
    assert np.all(np.diff(col) > 0)


def test_same_seed_same_grid():
    net = m.init("mlp-moons", Rng(2))
    s = np.array([1.0, 0.0])
    a = input_surface(net, s, 0, seed=7, xs=[-0.1, 0, 0.1], ys=[-0.1, 0.1])
    b = input_surface(net, s, 0, seed=7, xs=[-0.1, 0, 0.1], ys=[-0.1, 0.1])
    assert a.loss.tobytes() == b.loss.tobytes() and a.meta == b.meta


def test_default_grid_is_41_square():
    g = input_surface(_linear_net(), np.array([0.0, 0.0]), 1)
    assert g.loss.shape == (41, 41)
    assert g.xs[0] == -0.1 and g.xs[-1] == 0.1


def test_csv_round_trip_is_lossless(tmp_path):
    g = input_surface(m.init("mlp-moons", Rng(3)), np.array([0.5, 0.5]), 1, xs=np.linspace(-0.1, 0.1, 7),
                      ys=np.linspace(-0.05, 0.05, 3), seed=4)
    g.to_csv(tmp_path / "g.csv")
    back = LandscapeGrid.from_csv(tmp_path / "g.csv")
    assert back.loss.tobytes() == g.loss.tobytes()
    assert back.xs.tobytes() == g.xs.tobytes() and back.ys.tobytes() == g.ys.tobytes()
    assert back.meta == {k: str(v) for k, v in g.meta.items()}


def test_too_few_steps_and_shape_mismatch():
    net = _linear_net()
    with pytest.raises(ValueError):
        input_surface(net, np.zeros(2), 0, xs=[0.0], ys=[0.0, 1.0])
    with pytest.raises(ValueError):
        input_surface(net, np.zeros((1, 2)), 0)
    with pytest.raises(ValueError):
        LandscapeGrid([0, 1], [0, 1, 2], np.zeros((2, 2)))


def test_zero_noise_sharpness_is_exactly_zero():
    net = m.init("mlp-moons", Rng(0))
    x = Rng(1).gaussian((20, 2))
    y = Rng(2).integers(0, 2, size=20)
    zero = [{k: np.zeros_like(v) for k, v in net.params.items()}] * 3
    r = weight_sharpness(net, x, y, noise=zero)
    assert r["mean_increase"] == 0.0 and r["max_increase"] == 0.0


def test_quadratic_expected_increase():
    # f(w) = |w|^2 / 2 at w = 0: E f(u) = sigma^2 dim / 2
    dim, sigma = 10, 0.3
    r = sharpness(lambda p: 0.5 * float(np.sum(p["w"] ** 2)), {"w": np.zeros(dim)}, sigma, 1000, Rng(0))
    assert r["mean_increase"] == pytest.approx(sigma ** 2 * dim / 2, rel=0.1)
    assert r["mean_increase"] <= r["max_increase"]


def test_sharpness_rejects_bad_args():
    with pytest.raises(ValueError):
        sharpness(lambda p: 0.0, {"w": np.zeros(1)}, 0.0, 10, Rng(0))
    with pytest.raises(ValueError):
        sharpness(lambda p: 0.0, {"w": np.zeros(1)}, 0.1, 0, Rng(0))


def test_weight_sharpness_is_seeded():
    net = m.init("mlp-moons", Rng(0))
    x = Rng(1).gaussian((20, 2))
    y = Rng(2).integers(0, 2, size=20)
    a = weight_sharpness(net, x, y, n_samples=20, seed=5)
    b = weight_sharpness(net, x, y, n_samples=20, seed=5)
    assert a == b
