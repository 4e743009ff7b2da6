import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trat import autodiff as ad
from trat import model as m
from trat.ndarray import Rng


def test_identity_dense():
    net = m.Network("dense(2,2)", {"l0.weight": np.eye(2), "l0.bias": np.zeros(2)})
    assert net.logits(np.array([3.0, 5.0])).tolist() == [3.0, 5.0]


def test_zero_weights_give_zero_logits():
    net = m.Network("mlp-moons")
    x = Rng(0).gaussian((7, 2))
    assert np.all(net.logits(x) == 0.0)


def test_two_layer_mlp_matches_hand_arithmetic():
    net = m.init("dense(3,5),tanh,dense(5,2)", Rng(123))
    net.params["l0.bias"] = np.linspace(-0.5, 0.5, 5)
    net.params["l2.bias"] = np.array([0.1, -0.2])
    x = Rng(9).gaussian((4, 3))
    w0, b0, w2, b2 = (net.params[k] for k in ("l0.weight", "l0.bias", "l2.weight", "l2.bias"))
    expect = np.zeros((4, 2))
    for n in range(4):
        hidden = [np.tanh(sum(w0[j, i] * x[n, i] for i in range(3)) + b0[j]) for j in range(5)]
        for k in range(2):
            expect[n, k] = sum(w2[k, j] * hidden[j] for j in range(5)) + b2[k]
    np.testing.assert_allclose(net.logits(x), expect, rtol=1e-12, atol=1e-12)


def naive_conv(x, w, b, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for a in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = x[a, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[a, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (1, 1), (2, 2)])
def test_conv_matches_loops(stride, pad):
    rng = Rng(stride * 10 + pad)
    arch = f"conv(2,3,3,{stride},{pad}),flatten,dense({3 * ((7 + 2 * pad - 3) // stride + 1) ** 2},2)"
    net = m.init(arch, rng)
    net.params["l0.bias"] = rng.gaussian((3,))
    x = rng.gaussian((2, 2, 7, 7))
    ref = naive_conv(x, net.params["l0.weight"], net.params["l0.bias"], stride, pad).reshape(2, -1)
    expect = ref @ net.params["l2.weight"].T + net.params["l2.bias"]
    np.testing.assert_allclose(net.logits(x), expect, rtol=1e-12, atol=1e-12)


def test_cnn_tiny_shapes():
    net = m.init("cnn-tiny", Rng(0))
    assert net.logits(np.zeros((3, 1, 28, 28))).shape == (3, 10)
    assert net.logits(np.zeros((1, 28, 28))).shape == (10,)
    with pytest.raises(ValueError, match="flattens"):
        net.logits(np.zeros((1, 1, 20, 20)))


def test_input_shape_mismatch():
    net = m.init("mlp-moons", Rng(0))
    with pytest.raises(ValueError, match="does not match"):
        net.logits(np.zeros((4, 3)))


def test_he_init_statistics():
    net = m.init("dense(100,50),tanh,dense(50,2)", Rng(17))
    std = net.params["l0.weight"].std()
    assert abs(std - np.sqrt(2 / 100)) < 0.1 * np.sqrt(2 / 100)
    assert np.all(net.params["l0.bias"] == 0.0) and np.all(net.params["l2.bias"] == 0.0)


def test_init_deterministic():
    a, b = m.init("mlp-moons", Rng(5)), m.init("mlp-moons", Rng(5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.parametrize("bad,pos", [
    ("dense(2,3),tanh,,dense(3,2)", 16),
    ("dense(2,x)", 6),
    ("dense(2,3),sigmoid", 11),
    ("dense(2,3),", 11),
])
def test_parse_errors_carry_position(bad, pos):
    with pytest.raises(m.ArchParseError) as e:
        m.parse_arch(bad)
    assert e.value.position == pos


def test_composition_errors():
    with pytest.raises(ValueError, match="expects 4 inputs"):
        m.parse_arch("dense(2,3),tanh,dense(4,2)")
    with pytest.raises(ValueError, match="final layer"):
        m.parse_arch("dense(2,3),tanh")


def test_final_layer_exposed():
    net = m.init("mlp-moons", Rng(0))
    assert net.final_weight == "l4.weight" and net.num_classes == 2
    assert net.params[net.final_weight].shape == (2, 64)


def test_per_sample_final_matches_plain_forward():
    net = m.init("mlp-moons", Rng(3))
    x = Rng(4).gaussian((5, 2))
    logits, w = net.forward(x, per_sample_final=True)
    assert w.shape == (5, 2, 64)
    np.testing.assert_allclose(logits.value, net.logits(x), rtol=1e-14, atol=1e-14)


# --- checkpoints -----------------------------------------------------------


def _net():
    net = m.init("dense(3,4),relu,dense(4,2)", Rng(8))
    net.params["l0.bias"] = np.array([1e-300, -0.0, np.pi, 5e-324])
    return net


def test_round_trip_bit_exact(tmp_path):
    net = _net()
    m.save(net, tmp_path / "a.ckpt")
    back = m.load(tmp_path / "a.ckpt")
    assert back.arch == net.arch
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()


def test_layout_fields():
    buf = m.to_bytes(_net())
    assert buf[:4] == b"TRAT"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def test_corrupted_byte_is_crc_error():
    buf = bytearray(m.to_bytes(_net()))
    buf[-12] ^= 0x01  # inside the last float
    with pytest.raises(m.CheckpointCRCError):
        m.from_bytes(bytes(buf))


def test_wrong_magic():
    buf = b"XRAT" + m.to_bytes(_net())[4:]
    with pytest.raises(m.CheckpointFormatError):
        m.from_bytes(buf)


def test_wrong_version():
    buf = bytearray(m.to_bytes(_net()))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(m.CheckpointVersionError):
        m.from_bytes(bytes(buf))


def test_truncated():
    buf = m.to_bytes(_net())
    for cut in (0, 3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(m.CheckpointTruncatedError):
            m.from_bytes(buf[:cut])


def test_descriptor_disagreeing_with_shapes():
    net = _net()
    bad = m.Network.__new__(m.Network)
    bad.arch = "dense(3,5),relu,dense(5,2)"
    bad.params = net.params
    with pytest.raises(m.CheckpointFormatError, match="disagree"):
        m.from_bytes(m.to_bytes(bad))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_any_single_byte_corruption_is_rejected(data):
    buf = bytearray(m.to_bytes(_net()))
    i = data.draw(st.integers(0, len(buf) - 1))
    flip = data.draw(st.integers(1, 255))
    buf[i] ^= flip
    with pytest.raises(m.CheckpointError):
        m.from_bytes(bytes(buf))


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "x.ckpt"
    m.save(_net(), target)
    before = target.read_bytes()

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(m.os, "replace", boom)
    with pytest.raises(OSError):
        m.save(m.init("dense(3,4),relu,dense(4,2)", Rng(99)), target)
    assert target.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]


def test_forward_differentiable_through_conv():
    net = m.init("conv(1,2,3,1,1),tanh,flatten,dense(32,2)", Rng(1))
    x = Rng(2).gaussian((1, 1, 4, 4))
    leaves = ad.leaves(net.params)
    g = ad.backward(ad.sum_(net.forward(x, leaves)), leaves)
    assert g["l0.weight"].shape == (2, 1, 3, 3)
