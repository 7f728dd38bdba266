"""Network wiring, output application, and the weight file format."""

import struct

import numpy as np
import pytest

from ecc import eccw, ops
from ecc.autodiff import Tape, Tensor, gradient_check
from ecc.model import (EccNet, apply_correction, correct_patch, flip_lr,
                       predict_gaze)

RNG = np.random.default_rng(11)


def rand_patches(b=2, h=32, w=64):
    return np.asarray(RNG.random((b, 3, h, w)), np.float32)


def test_forward_shapes_and_ranges():
    model = EccNet(seed=0)
    img = rand_patches()
    gaze = np.array([[0.3, -0.2], [0.0, 0.5]], np.float32)
    out = model.infer(img, gaze)
    assert out.flow.shape == (2, 2, 32, 64)
    assert out.brightness.shape == (2, 1, 32, 64)
    assert np.all(out.brightness >= 0) and np.all(out.brightness <= 1)
    assert out.mean_flow().shape == (2, 2)
    assert out.flow_magnitudes().shape == (2, 32, 64)


def test_fresh_model_starts_near_identity_in_training_mode():
    # With batch statistics active, the pinned head bias keeps the initial
    # correction gentle: small flows, brightness around sigmoid(-2).
    model = EccNet(seed=0)
    img = Tensor(rand_patches(8))
    with Tape():
        flow, bright = model.forward(img, np.zeros((8, 2)), training=True,
                                     update_stats=False)
    assert float(np.abs(flow.data).mean()) < 5.0
    assert 0.03 < float(bright.data.mean()) < 0.4


def test_same_seed_same_outputs():
    img = rand_patches(1)
    gaze = np.zeros((1, 2), np.float32)
    a = EccNet(seed=5).infer(img, gaze)
    b = EccNet(seed=5).infer(img, gaze)
    assert np.array_equal(a.flow, b.flow)
    assert np.array_equal(a.brightness, b.brightness)
    c = EccNet(seed=6).infer(img, gaze)
    assert not np.array_equal(a.flow, c.flow)


def test_gaze_conditions_output():
    model = EccNet(seed=0)
    img = rand_patches(1)
    a = model.infer(img, np.array([[0.8, 0.0]], np.float32))
    b = model.infer(img, np.array([[-0.8, 0.0]], np.float32))
    assert not np.array_equal(a.flow, b.flow)


def test_parameter_count_in_expected_band():
    model = EccNet()
    total = sum(int(np.prod(t.data.shape)) for t in model.params.values())
    assert 40_000 < total < 60_000


def test_invalid_inputs_rejected():
    model = EccNet()
    with pytest.raises(ValueError):
        model.infer(np.zeros((1, 4, 32, 64), np.float32), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        model.infer(np.zeros((1, 3, 30, 64), np.float32), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        model.infer(np.zeros((1, 3, 32, 64), np.float32), np.zeros((2, 2)))


def test_training_mode_updates_running_stats():
    model = EccNet(seed=0)
    st = model.bn_states["enc1.l1.bn"]
    before = st.mean.copy()
    with Tape():
        model.forward(Tensor(rand_patches()), np.zeros((2, 2)), training=True)
    assert not np.array_equal(st.mean, before)


def test_gradients_reach_every_trainable_parameter():
    model = EccNet(seed=0)
    img = Tensor(rand_patches(2, 16, 32))
    target = Tensor(rand_patches(2, 16, 32))
    with Tape() as tape:
        flow, bright = model.forward(img, np.zeros((2, 2)), training=True,
                                     update_stats=False)
        loss = ops.mse(apply_correction(img, flow, bright), target)
    tape.backward(loss)
    dead = [k for k, t in model.params.items() if t.grad is None]
    assert dead == []


def test_finetune_parameter_subset():
    model = EccNet()
    names = set(model.trainable(finetune=True))
    assert names and all(n.startswith("enc1.") for n in names)
    assert set(model.trainable()) > names


def test_full_network_gradient_check():
    """Finite differences through the whole graph, warp and blend included.

    The head is pinned so flow lands well inside one bilinear cell
    (fractional, away from integers), keeping the loss smooth around the
    probe point.
    """
    model = EccNet(seed=3).cast_(np.float64)
    model.params["head.w"].data[:2] *= 0.1
    model.params["head.b"].data[:2] = 0.5
    rng = np.random.default_rng(0)
    img = 0.2 + 0.6 * rng.random((2, 3, 8, 16))
    gaze = rng.uniform(-1, 1, (2, 2))
    target = 0.2 + 0.6 * rng.random((2, 3, 8, 16))
    picked = ["enc1.l1.pw.w", "enc2.l2.dw.w", "mid.l3.pw.w", "up1.w",
              "dec2.l1.bn.gamma", "head.w", "head.b"]

    def fn(t):
        for k in picked:
            model.params[k] = t[k]
        flow, bright = model.forward(t["img"], gaze, training=True,
                                     update_stats=False)
        corrected = apply_correction(t["img"], flow, bright)
        return ops.mse(corrected, Tensor(target))

    inputs = {"img": Tensor(img)}
    inputs.update({k: model.params[k] for k in picked})
    report = gradient_check(fn, inputs, tolerance=1e-3,
                            max_coords_per_input=20, seed=1, name="full_net")
    assert report.passed, report.summary()


# ------------------------------------------------------- output application


def test_zero_strength_is_bitwise_passthrough():
    img = rand_patches(1)
    flow = np.asarray(RNG.standard_normal((1, 2, 32, 64)), np.float32)
    bright = np.asarray(RNG.random((1, 1, 32, 64)), np.float32)
    out = apply_correction(Tensor(img), Tensor(flow), Tensor(bright), strength=0.0)
    assert np.array_equal(out.data, img)


def test_zeroed_head_gives_null_field():
    model = EccNet(seed=0)
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    out = model.infer(rand_patches(2), np.zeros((2, 2), np.float32))
    assert np.all(out.flow == 0.0)
    assert np.all(out.brightness == 0.5)


def test_full_brightness_saturates_to_white():
    img = rand_patches(1)
    flow = np.asarray(RNG.standard_normal((1, 2, 32, 64)), np.float32)
    ones = np.ones((1, 1, 32, 64), np.float32)
    out = apply_correction(Tensor(img), Tensor(flow), Tensor(ones), 1.0).data
    np.testing.assert_array_equal(out, np.ones_like(img))


def test_brightness_blend_is_monotone():
    img = rand_patches(1)
    flow = np.asarray(RNG.standard_normal((1, 2, 32, 64)), np.float32)
    m1 = np.asarray(RNG.random((1, 1, 32, 64)), np.float32) * 0.8
    m2 = np.clip(m1 + RNG.random((1, 1, 32, 64)).astype(np.float32) * 0.2, 0, 1)
    out1 = apply_correction(Tensor(img), Tensor(flow), Tensor(m1), 0.7).data
    out2 = apply_correction(Tensor(img), Tensor(flow), Tensor(m2), 0.7).data
    assert np.all(out2 >= out1 - 1e-7)


def test_brightness_blend_matches_formula():
    img = rand_patches(1)
    bright = np.asarray(RNG.random((1, 1, 32, 64)), np.float32) * 0.5
    zero_flow = np.zeros((1, 2, 32, 64), np.float32)
    out = apply_correction(Tensor(img), Tensor(zero_flow), Tensor(bright)).data
    want = np.clip(img + bright * (1.0 - img), 0.0, 1.0)
    np.testing.assert_allclose(out, want, atol=1e-7)
    assert np.all(out >= img - 1e-7)  # blend only moves toward white


def test_half_strength_scales_flow_and_brightness():
    img = rand_patches(1)
    flow = np.full((1, 2, 32, 64), 3.0, np.float32)
    bright = np.full((1, 1, 32, 64), 0.4, np.float32)
    half = apply_correction(Tensor(img), Tensor(flow), Tensor(bright), 0.5).data
    manual = apply_correction(Tensor(img), Tensor(flow * 0.5),
                              Tensor(bright * 0.5), 1.0).data
    np.testing.assert_array_equal(half, manual)


def test_predict_gaze_negates_scaled_mean_flow():
    flow = np.zeros((2, 2, 4, 4))
    flow[0, 0] = 2.0   # mean u = 2
    flow[0, 1] = -1.0  # mean v = -1
    flow[1, 0] = 0.5
    est = predict_gaze(flow, k=(0.25, 2.0))
    np.testing.assert_allclose(est[0], [-0.5, 2.0])
    np.testing.assert_allclose(est[1], [-0.125, 0.0])


def test_left_eye_path_mirrors_right_eye_path():
    model = EccNet(seed=2)
    patch = np.asarray(RNG.random((3, 32, 64)), np.float32)
    gaze = (0.4, -0.3)
    left_out, _ = correct_patch(model, patch, gaze, left=True)
    mirrored, _ = correct_patch(model, flip_lr(patch), (-gaze[0], gaze[1]))
    np.testing.assert_array_equal(left_out, flip_lr(mirrored))
    assert left_out.shape == patch.shape


# ------------------------------------------------------------- weight files


def test_weights_roundtrip_bitwise(tmp_path):
    model = EccNet(seed=9)
    path = tmp_path / "m.eccw"
    eccw.save_weights(path, model.weights())
    loaded = eccw.load_weights(path)
    orig = model.weights()
    assert set(loaded) == set(orig)
    for k in orig:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], orig[k]), k
    # Loading into a fresh model reproduces outputs exactly.
    img = rand_patches(1)
    gaze = np.zeros((1, 2), np.float32)
    other = EccNet(seed=0)
    other.load_weights(loaded)
    assert np.array_equal(other.infer(img, gaze).flow, model.infer(img, gaze).flow)


def test_weight_file_is_canonical(tmp_path):
    w = {"b": np.arange(4, dtype=np.float32).reshape(2, 2),
         "a": np.ones(3, np.float32)}
    p1, p2 = tmp_path / "1.eccw", tmp_path / "2.eccw"
    eccw.save_weights(p1, w)
    eccw.save_weights(p2, {"a": w["a"], "b": w["b"]})
    assert p1.read_bytes() == p2.read_bytes()
    # Spot-check the header bytes: magic, version 1, two entries.
    head = p1.read_bytes()[:12]
    assert head[:4] == b"ECCW"
    assert struct.unpack("<II", head[4:]) == (1, 2)


def test_weight_file_error_cases(tmp_path):
    good = tmp_path / "ok.eccw"
    eccw.save_weights(good, {"x": np.zeros((2, 3), np.float32)})
    raw = good.read_bytes()

    bad_magic = tmp_path / "bad_magic.eccw"
    bad_magic.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(eccw.WeightFormatError, match="magic"):
        eccw.load_weights(bad_magic)

    bad_version = tmp_path / "bad_version.eccw"
    bad_version.write_bytes(raw[:4] + struct.pack("<I", 7) + raw[8:])
    with pytest.raises(eccw.WeightFormatError, match="version"):
        eccw.load_weights(bad_version)

    truncated = tmp_path / "trunc.eccw"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(eccw.WeightFormatError, match="truncated.*'x'"):
        eccw.load_weights(truncated)

    trailing = tmp_path / "trail.eccw"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(eccw.WeightFormatError, match="trailing"):
        eccw.load_weights(trailing)


def test_load_weights_validates_names_and_shapes():
    model = EccNet()
    w = model.weights()
    extra = dict(w)
    extra["bogus.entry"] = np.zeros(1, np.float32)
    with pytest.raises(ValueError, match="bogus.entry"):
        model.load_weights(extra)
    short = dict(w)
    short.pop("head.b")
    with pytest.raises(ValueError, match="head.b"):
        model.load_weights(short)
    wrong = dict(w)
    wrong["head.b"] = np.zeros(4, np.float32)
    with pytest.raises(ValueError, match="head.b"):
        model.load_weights(wrong)
