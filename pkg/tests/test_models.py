"""Model zoo: construction, recurrence wirings, unroll/step conformance, training."""

import numpy as np
import pytest

import recurstab.tensor as T
from recurstab.models import (
    ArchitectureSpec,
    ModelError,
    build,
    load_checkpoint,
    save_checkpoint,
    wiring_plan,
)
from recurstab.normalize import NormalizerConfig
from recurstab.dataio import make_test_still
from recurstab.tensor import Tensor, conv2d_raw
from recurstab.training import TrainConfig, load_adam, train


class TestSpecValidation:
    def test_defaults(self):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature")
        assert spec.channels == 64 and spec.depth == 10
        tiny = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature")
        assert tiny.channels == 16 and tiny.total_convs() == 3
        vres = ArchitectureSpec(backbone="vresnet", recurrence="frame")
        assert vres.depth == 5 and vres.total_convs() == 12

    def test_invalid_combinations(self):
        with pytest.raises(ModelError, match="backbone"):
            ArchitectureSpec(backbone="unet", recurrence="frame")
        with pytest.raises(ModelError, match="recurrence"):
            ArchitectureSpec(backbone="vdncnn", recurrence="lstm")
        with pytest.raises(ModelError, match="supported matrix"):
            ArchitectureSpec(backbone="vdncnn", recurrence="feature", depth=2)
        with pytest.raises(ModelError, match="odd"):
            ArchitectureSpec(backbone="vdncnn", recurrence="frame", kernel_size=4)

    def test_wiring_plan_indices(self):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", depth=10)
        assert wiring_plan(spec) == {"inject": 1, "tap": 5}
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="rlsp", depth=10)
        assert wiring_plan(spec) == {"inject": 1, "tap": 8}
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature_shift", depth=10)
        assert wiring_plan(spec) == {"inject": 5, "tap": 0}


class TestBuild:
    def test_same_seed_bit_identical(self):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", channels=4,
                                depth=5, in_channels=1)
        a, b = build(spec, seed=3), build(spec, seed=3)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.kernel.data, lb.kernel.data)

    def test_vdncnn_has_ten_convs(self):
        model = build(ArchitectureSpec(backbone="vdncnn", recurrence="frame",
                                       channels=4, in_channels=1), seed=0)
        assert len(model.layers) == 10

    def test_vresnet_block_structure(self):
        model = build(ArchitectureSpec(backbone="vresnet", recurrence="frame",
                                       channels=4, in_channels=1), seed=0)
        names = [l.name for l in model.layers]
        assert names[0] == "head" and names[-1] == "tail"
        assert len(names) == 2 + 2 * 5
        assert "b2a" in names and "b4b" in names

    def test_init_modes_differ(self):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        g = build(spec, seed=1, init="gaussian", sigma_init=0.1)
        h = build(spec, seed=1, init="he")
        assert not np.allclose(g.layers[0].kernel.data, h.layers[0].kernel.data)
        std = float(g.layers[1].kernel.data.std())
        assert std == pytest.approx(0.1, rel=0.15)


class TestStep:
    def test_none_single_state_independent(self, rng):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="none_single",
                                channels=4, depth=5, in_channels=1)
        m = build(spec, seed=0)
        m.freeze(8)
        x = rng.random((8, 8, 1), dtype=np.float32)
        s = m.init_state(8)
        y1, s = m.step(s, x)
        y2, s = m.step(s, x)
        np.testing.assert_array_equal(y1, y2)

    def test_zero_recurrent_kernels_match_stateless(self, rng):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", channels=4,
                                depth=5, in_channels=1)
        m = build(spec, seed=5)
        m.by_name["conv01"].kernel.data[:, :, 4:, :] = 0.0
        m.freeze(8)
        s = m.init_state(8)
        x = rng.random((8, 8, 1), dtype=np.float32)
        y1, s = m.step(s, x)
        s.tensors["h"] = 10 * rng.standard_normal(s.tensors["h"].shape).astype(np.float32)
        y2, _ = m.step(s, x)
        np.testing.assert_array_equal(y1, y2)

    def test_frame_recurrence_manual_unroll_oracle(self, rng):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="frame", channels=4,
                                depth=5, in_channels=1)
        m = build(spec, seed=4)
        m.freeze(8)
        x1 = rng.random((8, 8, 1), dtype=np.float32)
        x2 = rng.random((8, 8, 1), dtype=np.float32)
        s = m.init_state(8)
        y1, s = m.step(s, x1)
        y2, s = m.step(s, x2)

        def fwd(xin, prev):
            f = np.concatenate([xin, prev], axis=-1)
            for i, layer in enumerate(m.layers):
                f = conv2d_raw(f, layer.frozen_kernel) + layer.bias.data
                if i < len(m.layers) - 1:
                    f = np.maximum(f, 0)
            return f

        y1m = fwd(x1, np.zeros_like(x1))
        y2m = fwd(x2, y1m)
        np.testing.assert_array_equal(y1, y1m)
        np.testing.assert_array_equal(y2, y2m)

    def test_divergence_flag_not_exception(self):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=2, in_channels=1)
        m = build(spec, seed=0)
        # positive huge kernels so the signal overflows instead of dying in ReLU
        m.layers[0].kernel.data = np.abs(m.layers[0].kernel.data) * np.float32(1e20)
        m.layers[1].kernel.data = np.abs(m.layers[1].kernel.data) * np.float32(1e20)
        m.freeze(8)
        s = m.init_state(8)
        x = np.ones((8, 8, 1), dtype=np.float32)
        with np.errstate(over="ignore", invalid="ignore"):
            y, s = m.step(s, x)
            y, s = m.step(s, x)
        assert s.diverged

    def test_array_mode_needs_frozen_model(self, rng):
        m = build(ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                   channels=2, in_channels=1), seed=0)
        with pytest.raises(ModelError, match="frozen"):
            m.step(m.init_state(8), rng.random((8, 8, 1), dtype=np.float32))

    def test_state_reset_determinism(self, rng):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="rlsp", channels=4,
                                depth=5, in_channels=1)
        m = build(spec, seed=2)
        m.freeze(8)
        X = [rng.random((8, 8, 1), dtype=np.float32) for _ in range(6)]
        s = m.init_state(8)
        first = []
        for x in X:
            y, s = m.step(s, x)
            first.append(y)
        s.reset()
        for x, y_ref in zip(X, first):
            y, s = m.step(s, x)
            np.testing.assert_array_equal(y, y_ref)


class TestUnroll:
    @pytest.mark.parametrize("backbone,rec", [
        ("vdncnn", "none_multi"), ("vdncnn", "feature_shift"), ("vdncnn", "frame"),
        ("vdncnn", "feature"), ("vdncnn", "rlsp"),
        ("vresnet", "frame"), ("vresnet", "feature"), ("vresnet", "rlsp"),
        ("tiny_vdncnn", "feature"),
    ])
    def test_unroll_equals_iterated_step(self, backbone, rec, rng):
        spec = ArchitectureSpec(backbone=backbone, recurrence=rec, channels=3,
                                depth=5 if backbone == "vdncnn" else 0, in_channels=1)
        m = build(spec, seed=6)
        m.freeze(8)
        X = [rng.random((8, 8, 1), dtype=np.float32) for _ in range(3)]
        ys, _ = m.unroll([Tensor(x) for x in X])
        s = m.init_state(8)
        for x, y_ref in zip(X, ys):
            y, s = m.step(s, Tensor(x))
            assert np.array_equal(y.data, y_ref.data)

    def test_t1_equals_step_on_zero_state(self, rng):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=3, in_channels=1)
        m = build(spec, seed=1)
        m.freeze(8)
        x = rng.random((8, 8, 1), dtype=np.float32)
        ys, _ = m.unroll([Tensor(x)])
        y, _ = m.step(m.init_state(8), Tensor(x))
        np.testing.assert_array_equal(ys[0].data, y.data)

    def test_frozen_and_traced_paths_agree(self, rng):
        spec = ArchitectureSpec(backbone="vdncnn", recurrence="feature", channels=4,
                                depth=5, in_channels=1)
        m = build(spec, seed=8)
        m.freeze(8)
        x = rng.random((8, 8, 1), dtype=np.float32)
        s1, s2 = m.init_state(8), m.init_state(8)
        ya, _ = m.step(s1, x)
        yt, _ = m.step(s2, Tensor(x))
        np.testing.assert_array_equal(ya, yt.data)

    def test_guardrail(self):
        m = build(ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                   channels=2, in_channels=1), seed=0)
        m.freeze(6)
        X = [Tensor(np.zeros((6, 6, 1), dtype=np.float32))] * 129
        with pytest.raises(ModelError, match="guardrail"):
            m.unroll(X)

    def test_bptt_gradients_match_finite_differences(self):
        # T=3 unroll of the tiny feature model against a float64 replica
        rng = np.random.default_rng(77)
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=3, in_channels=1)
        m = build(spec, seed=3)
        m.norm_n = 6
        X = [rng.random((6, 6, 1), dtype=np.float32) for _ in range(3)]
        targets = [rng.random((6, 6, 1), dtype=np.float32) for _ in range(3)]

        def traced_loss():
            ys, _ = m.unroll([Tensor(x) for x in X])
            total = None
            for y, t in zip(ys, targets):
                term = T.mse(y, Tensor(t))
                total = term if total is None else total + term
            return total

        loss = traced_loss()
        loss.backward()

        Ks = [l.kernel.data.astype(np.float64) for l in m.layers]
        bs = [l.bias.data.astype(np.float64) for l in m.layers]

        def f64_loss(Ks64):
            h = np.zeros((6, 6, 3))
            total = 0.0
            for x, t in zip(X, targets):
                f = np.maximum(conv2d_raw(x.astype(np.float64), Ks64[0]) + bs[0], 0)
                f = np.concatenate([f, h], axis=-1)
                f = conv2d_raw(f, Ks64[1]) + bs[1]
                h = np.maximum(f, 0)
                y = conv2d_raw(np.maximum(f, 0), Ks64[2]) + bs[2]
                total += np.mean((y - t) ** 2)
            return float(total)

        # small step keeps the probe clear of ReLU kinks over the 3-frame unroll
        eps = 5e-5
        for li, layer in enumerate(m.layers):
            analytic = layer.kernel.grad
            idx = [tuple(rng.integers(0, s) for s in layer.kernel.shape) for _ in range(4)]
            for ix in idx:
                work = [K.copy() for K in Ks]
                work[li][ix] += eps
                plus = f64_loss(work)
                work[li][ix] -= 2 * eps
                minus = f64_loss(work)
                fd = (plus - minus) / (2 * eps)
                assert abs(fd - analytic[ix]) <= 1e-3 * max(abs(fd), abs(analytic[ix]), 1e-5), \
                    (li, ix, fd, analytic[ix])


class TestFeedforwardBoundedness:
    def test_gaussian_init_feedforward_bounded(self):
        # random feedforward models keep output norms within 10x of the first
        # frame over 50 random frames (sampled wirings, 20 seeds)
        from recurstab.diagnostics import run_output_norms
        for rec in ("none_single", "none_multi", "feature_shift"):
            for seed in range(20):
                spec = ArchitectureSpec(backbone="vdncnn", recurrence=rec, channels=16,
                                        depth=5, in_channels=1)
                m = build(spec, seed=seed, init="gaussian", sigma_init=0.1)
                m.freeze(16)
                norms = run_output_norms(m, 50, 16, seed)
                assert np.nanmax(norms) <= 10.0 * norms[0], (rec, seed)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        norm = NormalizerConfig(scheme="srnl", alpha=0.5, beta=1.0)
        m = build(spec, seed=5, init="he", norm=norm, norm_n=8)
        m.freeze(8)
        base = str(tmp_path / "ckpt")
        save_checkpoint(m, base, metadata={"steps": 7})
        back = load_checkpoint(base)
        for la, lb in zip(m.layers, back.layers):
            assert np.array_equal(la.kernel.data, lb.kernel.data)
            assert np.array_equal(la.bias.data, lb.bias.data)
        x = rng.random((8, 8, 1), dtype=np.float32)
        y1, _ = m.step(m.init_state(8), x)
        y2, _ = back.step(back.init_state(8), x)
        np.testing.assert_array_equal(y1, y2)
        assert back.meta["steps"] == 7

    def test_architecture_mismatch_detected(self, tmp_path):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        m = build(spec, seed=5)
        base = str(tmp_path / "ckpt")
        save_checkpoint(m, base)
        import json
        meta = json.load(open(base + ".json"))
        meta["architecture"]["channels"] = 8
        json.dump(meta, open(base + ".json", "w"))
        with pytest.raises(ModelError, match="shape"):
            load_checkpoint(base, freeze=False)


class TestTraining:
    def _stills(self):
        return [make_test_still(64, "smooth", seed=s, channels=1) for s in range(2)]

    def test_zero_lr_keeps_params_and_flat_loss(self):
        # constant data (constant still, zero noise) so the loss is exactly flat
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        m = build(spec, seed=0, init="he", norm_n=16)
        still = np.full((48, 48, 1), 0.25, dtype=np.float32)
        before = [p.data.copy() for p in m.parameters()]
        cfg = TrainConfig(frames=3, crop=16, sigma255=0.0, steps=4, lr=0.0, batch=1,
                          seed=0, val_every=0)
        res = train(m, cfg, stills=[still])
        assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))
        losses = [l for _, l, _ in res.curve]
        assert max(losses) == min(losses)

    def test_loss_decreases_on_tiny_run(self):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=8, in_channels=1)
        m = build(spec, seed=1, init="he", norm_n=16)
        cfg = TrainConfig(frames=5, crop=16, sigma255=20.0, steps=120, lr=1e-3,
                          batch=2, seed=1, val_every=0)
        res = train(m, cfg, stills=self._stills())
        losses = [l for _, l, _ in res.curve]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        norm = NormalizerConfig(scheme="srnl", alpha=1.0, beta=1.0)
        stills = self._stills()

        m_full = build(spec, seed=2, init="he", norm=norm, norm_n=16)
        cfg_full = TrainConfig(frames=3, crop=16, sigma255=20.0, steps=12, lr=1e-3,
                               batch=1, seed=2, val_every=0)
        res_full = train(m_full, cfg_full, stills=stills)

        m_a = build(spec, seed=2, init="he", norm=norm, norm_n=16)
        cfg_a = TrainConfig(frames=3, crop=16, sigma255=20.0, steps=6, lr=1e-3,
                            batch=1, seed=2, val_every=0)
        base = str(tmp_path / "half")
        res_a = train(m_a, cfg_a, stills=stills, checkpoint_base=base)
        m_b = load_checkpoint(base, freeze=False)
        m_b.norm_n = 16
        adam = load_adam(base + ".adam.rvpt", m_b.parameters(), lr=1e-3)
        cfg_b = TrainConfig(frames=3, crop=16, sigma255=20.0, steps=6, lr=1e-3,
                            batch=1, seed=2, val_every=0)
        res_b = train(m_b, cfg_b, stills=stills, adam=adam, start_step=6)

        resumed = [l for _, l, _ in res_a.curve] + [l for _, l, _ in res_b.curve]
        full = [l for _, l, _ in res_full.curve]
        assert resumed == full

    def test_nonfinite_loss_recorded_and_skipped(self):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        m = build(spec, seed=3, init="he", norm_n=16)
        m.layers[0].kernel.data *= np.float32(1e25)
        m.layers[1].kernel.data *= np.float32(1e25)
        before = [p.data.copy() for p in m.parameters()]
        cfg = TrainConfig(frames=3, crop=16, sigma255=20.0, steps=2, lr=1e-3, batch=1,
                          seed=3, val_every=0)
        with np.errstate(over="ignore", invalid="ignore"):
            res = train(m, cfg, stills=self._stills())
        assert any("non-finite training loss" in e for e in res.events)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))

    def test_halt_policy_stops(self):
        spec = ArchitectureSpec(backbone="tiny_vdncnn", recurrence="feature",
                                channels=4, in_channels=1)
        m = build(spec, seed=3, init="he", norm_n=16)
        m.layers[0].kernel.data *= np.float32(1e25)
        m.layers[1].kernel.data *= np.float32(1e25)
        cfg = TrainConfig(frames=3, crop=16, sigma255=20.0, steps=5, lr=1e-3, batch=1,
                          seed=3, val_every=0, nonfinite="halt")
        with np.errstate(over="ignore", invalid="ignore"):
            res = train(m, cfg, stills=self._stills())
        assert res.steps_done == 1 and len(res.curve) == 1
