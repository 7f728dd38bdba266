"""Optimizer, schedule, and training-loop tests.

The Adam oracle values were computed independently from the scalar
update equations (stability term outside the square root).
"""

import numpy as np
import pytest

from ecc.autodiff import Tensor
from ecc.model import EccNet, FINETUNE_PREFIX
from ecc.synthdata import EyeSample, EyeSet
from ecc.training import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    bidirectional_step,
    cyclic_lr,
    sample_batch,
    train,
)


def scalar_param(value):
    return {"x": Tensor(np.array([value], np.float64), requires_grad=True)}


class TestAdam:
    def test_matches_scalar_trace(self):
        # grads [0.5, -0.3, 0.8], lr 0.1, betas (0.9, 0.999), eps 0.1
        params = scalar_param(1.0)
        opt = Adam(params, beta1=0.9, beta2=0.999, eps=0.1)
        expected = [0.9166666667, 0.9012551460, 0.8498872330]
        for g, want in zip([0.5, -0.3, 0.8], expected):
            params["x"].grad = np.array([g], np.float64)
            opt.step(params, lr=0.1)
            assert abs(params["x"].data[0] - want) < 1e-6

    def test_constant_gradient_closed_form(self):
        # with a constant gradient the bias-corrected step is exactly
        # lr * g / (|g| + eps) at every iteration
        params = scalar_param(0.0)
        opt = Adam(params, eps=0.1)
        for _ in range(5):
            params["x"].grad = np.array([0.5], np.float64)
            opt.step(params, lr=0.2)
        assert abs(params["x"].data[0] - (-5 * 0.2 * 0.5 / 0.6)) < 1e-9

    def test_skips_missing_grads(self):
        params = scalar_param(2.0)
        opt = Adam(params)
        params["x"].grad = None
        opt.step(params, lr=0.5)
        assert params["x"].data[0] == 2.0
        assert opt.t == 1

    def test_zero_gradient_is_fixed_point(self):
        params = scalar_param(1.5)
        opt = Adam(params)
        params["x"].grad = np.array([0.0], np.float64)
        opt.step(params, lr=0.3)
        assert params["x"].data[0] == 1.5


class TestCyclicLr:
    def test_triangle_shape(self):
        cfg = TrainConfig(lr_min=0.002, lr_max=0.01, lr_cycle=2000)
        assert cyclic_lr(0, cfg) == pytest.approx(0.002)
        assert cyclic_lr(1000, cfg) == pytest.approx(0.01)
        assert cyclic_lr(500, cfg) == pytest.approx(0.006)
        assert cyclic_lr(1500, cfg) == pytest.approx(0.006)
        assert cyclic_lr(2000, cfg) == pytest.approx(0.002)
        assert cyclic_lr(3000, cfg) == pytest.approx(0.01)

    def test_monotone_within_half_cycle(self):
        cfg = TrainConfig(lr_cycle=100)
        ups = [cyclic_lr(s, cfg) for s in range(0, 51)]
        downs = [cyclic_lr(s, cfg) for s in range(50, 101)]
        assert all(a < b for a, b in zip(ups, ups[1:]))
        assert all(a > b for a, b in zip(downs, downs[1:]))


class TestConfig:
    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError, match="non-negative"):
            TrainConfig(correction_weight=-0.1)

    def test_allows_zero_one_weighting(self):
        cfg = TrainConfig(correction_weight=0.0, reconstruction_weight=1.0)
        assert cfg.correction_weight == 0.0

    def test_rejects_weights_not_summing_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TrainConfig(correction_weight=0.5, reconstruction_weight=0.2)
        with pytest.raises(ValueError, match="sum to 1"):
            TrainConfig(correction_weight=0.0, reconstruction_weight=0.0)

    def test_rejects_bad_lr_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_min=0.01, lr_max=0.002)


def toy_sets(n_sets=3, n_samples=4, seed=0):
    """Sets whose pixel values encode (set, sample) identity."""
    rng = np.random.default_rng(seed)
    sets = []
    for s in range(n_sets):
        es = EyeSet(name=f"s{s}", crop_box=(0, 0, 64, 32))
        for k in range(n_samples):
            img = np.full((3, 32, 64), s / 10.0 + k / 1000.0, np.float32)
            es.samples.append(
                EyeSample(
                    image=img,
                    gaze=rng.normal(0, 0.4, 2).astype(np.float32),
                    landmarks=np.zeros((6, 2), np.float32),
                )
            )
        sets.append(es)
    return sets


class TestSampleBatch:
    def test_pairs_come_from_one_set(self):
        cfg = TrainConfig(batch_size=32, augment=False)
        batch = sample_batch(toy_sets(), cfg, np.random.default_rng(1))
        img_in, gaze_in, img_tgt, gaze_tgt = batch
        assert img_in.shape == (32, 3, 32, 64) and img_in.dtype == np.float32
        for b in range(32):
            set_in = round(img_in[b, 0, 0, 0] * 10 - 0.04)
            set_tgt = round(img_tgt[b, 0, 0, 0] * 10 - 0.04)
            assert set_in == set_tgt
            # and the two samples are distinct
            assert img_in[b, 0, 0, 0] != img_tgt[b, 0, 0, 0]

    def test_ordered_pairs_uniform(self):
        # the skip-index draw must cover all 30 ordered pairs of a
        # 6-sample set uniformly; chi-square at p > 0.01
        from scipy.stats import chisquare

        k = 6
        es = EyeSet(name="s", crop_box=(0, 0, 64, 32))
        for idx in range(k):
            es.samples.append(EyeSample(
                image=np.full((3, 32, 64), idx / 10.0, np.float32),
                gaze=np.zeros(2, np.float32),
                landmarks=np.zeros((6, 2), np.float32),
            ))
        cfg = TrainConfig(batch_size=32, augment=False)
        rng = np.random.default_rng(7)
        counts = np.zeros((k, k))
        for _ in range(100):
            img_in, _, img_tgt, _ = sample_batch([es], cfg, rng)
            i = np.rint(img_in[:, 0, 0, 0] * 10).astype(int)
            j = np.rint(img_tgt[:, 0, 0, 0] * 10).astype(int)
            np.add.at(counts, (i, j), 1)
        assert counts.trace() == 0, "a pair repeated its own index"
        observed = counts[~np.eye(k, dtype=bool)]
        assert observed.sum() == 3200
        assert chisquare(observed).pvalue > 0.01


def quick_sets():
    """A small rendered dataset kept in memory for loop tests."""
    from ecc.imutil import bilinear_resize, chw, to_float, to_uint8
    from ecc import synthdata as sd

    sets = []
    for ss in np.random.SeedSequence(77).spawn(4):
        rng = np.random.Generator(np.random.PCG64(ss))
        cfg = sd.RenderConfig(gazes_per_set=4)
        _, box, samples = sd.generate_set(rng, cfg)
        es = EyeSet(name="x", crop_box=box)
        for patch, gaze, lm in samples:
            es.samples.append(
                EyeSample(
                    image=chw(to_float(patch)),
                    gaze=gaze.astype(np.float32),
                    landmarks=lm.astype(np.float32),
                )
            )
        sets.append(es)
    return sets


class TestTrainLoop:
    def test_loss_decreases_on_small_problem(self):
        sets = quick_sets()
        cfg = TrainConfig(
            iterations=60, batch_size=4, augment=False, seed=1,
            log_every=1, checkpoint_every=0, lr_cycle=120,
        )
        model = EccNet(seed=0)
        history = train(model, sets, cfg)
        first = np.mean([r.loss for r in history[:8]])
        last = np.mean([r.loss for r in history[-8:]])
        assert last < first * 0.8

    def test_deterministic(self):
        sets = quick_sets()
        cfg = TrainConfig(iterations=6, batch_size=2, seed=3, log_every=1,
                          checkpoint_every=0)
        m1 = EccNet(seed=5)
        h1 = train(m1, sets, cfg)
        m2 = EccNet(seed=5)
        h2 = train(m2, sets, cfg)
        assert [r.loss for r in h1] == [r.loss for r in h2]
        for name, t in m1.params.items():
            assert np.array_equal(t.data, m2.params[name].data), name

    def test_finetune_touches_only_first_block(self):
        sets = quick_sets()
        cfg = TrainConfig(iterations=4, batch_size=2, seed=0, log_every=1,
                          finetune=True, augment=False, checkpoint_every=0)
        model = EccNet(seed=2)
        before = {k: v.data.copy() for k, v in model.params.items()}
        stats_before = {
            k: (s.mean.copy(), s.var.copy()) for k, s in model.bn_states.items()
        }
        train(model, sets, cfg)
        changed = {
            k for k, v in model.params.items()
            if not np.array_equal(v.data, before[k])
        }
        assert changed
        assert all(k.startswith(FINETUNE_PREFIX) for k in changed)
        for k, s in model.bn_states.items():
            assert np.array_equal(s.mean, stats_before[k][0]), k
            assert np.array_equal(s.var, stats_before[k][1]), k

    def test_divergence_raises(self):
        sets = quick_sets()
        cfg = TrainConfig(iterations=3, batch_size=2, log_every=1,
                          checkpoint_every=0)
        model = EccNet(seed=0)
        model.params["head.b"].data[:] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, sets, cfg)

    def test_checkpoints_written(self, tmp_path):
        from ecc.eccw import load_weights

        sets = quick_sets()
        cfg = TrainConfig(iterations=4, batch_size=2, log_every=2,
                          checkpoint_every=2, seed=9)
        model = EccNet(seed=1)
        train(model, sets, cfg, out_dir=str(tmp_path))
        assert (tmp_path / "ckpt_000002.eccw").exists()
        assert (tmp_path / "ckpt_000004.eccw").exists()
        arrays = load_weights(tmp_path / "final.eccw")
        fresh = EccNet(seed=0)
        fresh.load_weights(arrays)
        for name, t in fresh.params.items():
            assert np.array_equal(t.data, model.params[name].data), name

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(EccNet(seed=0), [], TrainConfig(iterations=1))


class TestBidirectionalStep:
    def test_zero_head_identical_pair_baseline(self):
        # With a zeroed head the net emits no flow and brightness 0.5,
        # so correcting x yields 0.5 + 0.5 x and the correction loss has
        # the closed form mean((0.5 (1 - x))^2).
        rng = np.random.default_rng(11)
        img = rng.random((2, 3, 32, 64)).astype(np.float32)
        gaze = np.zeros((2, 2), np.float32)
        model = EccNet(seed=0)
        model.params["head.w"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.0
        cfg = TrainConfig(batch_size=2, augment=False)
        opt = Adam(model.trainable(False), beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps)
        report = bidirectional_step(
            model, (img, gaze, img.copy(), gaze.copy()), cfg, opt, lr=1e-3)
        want = float(np.mean((0.5 * (1.0 - img)) ** 2))
        assert report.correction == pytest.approx(want, rel=1e-5)
        assert report.loss == pytest.approx(
            0.8 * report.correction + 0.2 * report.reconstruction, rel=1e-5)

    def test_loss_weighting_changes_update(self):
        sets = quick_sets()
        after = []
        for wc, wr in ((1.0, 0.0), (0.8, 0.2)):
            model = EccNet(seed=0)
            cfg = TrainConfig(batch_size=2, augment=False,
                              correction_weight=wc, reconstruction_weight=wr)
            batch = sample_batch(sets, cfg, np.random.default_rng(3))
            opt = Adam(model.trainable(False), beta1=cfg.beta1,
                       beta2=cfg.beta2, eps=cfg.eps)
            bidirectional_step(model, batch, cfg, opt, lr=0.01)
            after.append({k: t.data.copy() for k, t in model.params.items()})
        assert any(
            not np.array_equal(after[0][k], after[1][k]) for k in after[0]
        )

    def test_reconstruction_gradient_reaches_pass_one(self):
        # Detaching the corrected image before pass 2 must change the
        # gradient the reconstruction loss sends into the encoder, which
        # is only possible if that loss normally backpropagates through
        # the first warp.
        from ecc import ops
        from ecc.autodiff import Tape
        from ecc.model import apply_correction

        sets = quick_sets()
        cfg = TrainConfig(batch_size=2, augment=False)
        img_in, gaze_in, _, gaze_tgt = sample_batch(
            sets, cfg, np.random.default_rng(5))
        key = next(k for k in sorted(EccNet(seed=1).params)
                   if k.startswith(FINETUNE_PREFIX))

        def recon_grad(detach):
            model = EccNet(seed=1)
            x = Tensor(img_in, requires_grad=False)
            with Tape() as tape:
                flow1, bright1 = model.forward(
                    x, gaze_tgt, training=True, update_stats=False)
                corrected = apply_correction(x, flow1, bright1)
                if detach:
                    corrected = Tensor(corrected.data.copy(),
                                       requires_grad=False)
                flow2, bright2 = model.forward(
                    corrected, gaze_in, training=True, update_stats=False)
                restored = apply_correction(corrected, flow2, bright2)
                loss_r = ops.mse(restored, x)
                for p in model.params.values():
                    p.zero_grad()
                tape.backward(loss_r)
            return model.params[key].grad.copy()

        g_full = recon_grad(detach=False)
        g_cut = recon_grad(detach=True)
        assert np.abs(g_full).max() > 0.0
        assert not np.allclose(g_full, g_cut, rtol=1e-3, atol=1e-10)
