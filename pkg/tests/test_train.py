import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganattack.kernels import DimensionError, FormatError
from ganattack.net import build_attack_model
from ganattack.train import (
    AdamWState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
    total_steps,
    train_attack,
    train_remover,
)

TINY = (2, 3, 4)


def toy_pairs(n=6, seed=0):
    rng = np.random.default_rng(seed)
    gan = rng.uniform(0.2, 0.8, (n, 3, 8, 8))
    real = np.clip(gan + 0.05 * rng.standard_normal(gan.shape), 0, 1)
    return gan, real


class TestCosine:
    def test_endpoints_exact(self):
        assert cosine_lr(0, 100) == 1e-3
        assert cosine_lr(100, 100) == 1e-6

    def test_midpoint(self):
        assert cosine_lr(50, 100) == pytest.approx(0.5 * (1e-3 + 1e-6), rel=1e-12)

    @given(st.integers(1, 500))
    @settings(max_examples=50)
    def test_monotone_non_increasing(self, total):
        lrs = [cosine_lr(s, total) for s in range(total + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(1e-6 <= v <= 1e-3 for v in lrs)

    def test_formula(self):
        for s in (1, 17, 73):
            want = 1e-6 + 0.5 * (1e-3 - 1e-6) * (1 + math.cos(math.pi * s / 90))
            assert cosine_lr(s, 90) == pytest.approx(want, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10)
        with pytest.raises(ValueError):
            cosine_lr(0, 0)


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        p = build_attack_model(3, seed=0, widths=TINY)
        cfg = TrainConfig()
        zero = {k: np.zeros_like(v) for k, v in p.tensors.items()}
        q, state = adamw_step(p, zero, AdamWState.zeros_like(p), 1e-3, cfg)
        for k in p.tensors:
            assert np.array_equal(q.tensors[k], p.tensors[k] - 1e-3 * (0.01 * p.tensors[k]))
            np.testing.assert_allclose(q.tensors[k], p.tensors[k] * (1 - 1e-3 * 0.01), rtol=1e-15, atol=0)
        assert state.t == 1

    def test_first_step_matches_hand_computation(self):
        p = build_attack_model(3, seed=0, widths=TINY)
        cfg = TrainConfig()
        rng = np.random.default_rng(1)
        grads = {k: rng.standard_normal(v.shape) for k, v in p.tensors.items()}
        q, _ = adamw_step(p, grads, AdamWState.zeros_like(p), 1e-3, cfg)
        for k, w in p.tensors.items():
            g = grads[k]
            m_hat = (0.1 * g) / 0.1
            v_hat = (0.001 * g * g) / 0.001
            want = w - 1e-3 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * w)
            np.testing.assert_allclose(q.tensors[k], want, rtol=1e-12, atol=1e-15)

    def test_rejects_non_finite_gradient(self):
        p = build_attack_model(3, widths=TINY)
        grads = {k: np.zeros_like(v) for k, v in p.tensors.items()}
        grads["conv1.bias"][0] = np.nan
        with pytest.raises(FloatingPointError):
            adamw_step(p, grads, AdamWState.zeros_like(p), 1e-3, TrainConfig())

    def test_rejects_shape_mismatch(self):
        p = build_attack_model(3, widths=TINY)
        grads = {k: np.zeros_like(v) for k, v in p.tensors.items()}
        grads["conv1.bias"] = np.zeros(7)
        with pytest.raises(DimensionError):
            adamw_step(p, grads, AdamWState.zeros_like(p), 1e-3, TrainConfig())


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr0, c.lr_min, c.weight_decay) == (32, 1e-3, 1e-6, 0.01)

    def test_json_roundtrip(self):
        import json
        c = TrainConfig(batch_size=4, epochs=3, seed=9)
        assert TrainConfig.from_json(json.dumps(c.to_dict())) == c

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1})

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr0=1e-6, lr_min=1e-3)

    def test_total_steps_keeps_partial_batch(self):
        assert total_steps(10, TrainConfig(batch_size=4, epochs=3)) == 9

    def test_step_budget_overrides_epochs(self):
        assert total_steps(10, TrainConfig(batch_size=4, epochs=3, steps=7)) == 7
        with pytest.raises(ValueError):
            TrainConfig(steps=-1)


class TestTraining:
    def test_zero_epochs_returns_initial(self):
        gan, real = toy_pairs()
        p0 = build_attack_model(3, seed=0, widths=TINY)
        p, state, hist = train_attack(gan, real, TrainConfig(epochs=0), params=p0.copy())
        assert hist == [] and state.t == 0
        assert all(np.array_equal(p.tensors[k], p0.tensors[k]) for k in p0.tensors)

    def test_step_budget_runs_exactly(self):
        gan, real = toy_pairs()
        n = len(gan)
        # a budget that ends mid-epoch and spans more than one epoch
        steps = 2 * (n // 3) + 1
        _, state, hist = train_attack(gan, real, TrainConfig(batch_size=3, epochs=1, steps=steps),
                                      latent_channels=3, widths=TINY)
        assert len(hist) == steps and state.t == steps

    def test_deterministic(self):
        gan, real = toy_pairs()
        cfg = TrainConfig(batch_size=4, epochs=2, seed=3)
        a = train_attack(gan, real, cfg, latent_channels=3, widths=TINY)
        b = train_attack(gan, real, cfg, latent_channels=3, widths=TINY)
        assert a[2] == b[2]
        assert all(a[0].tensors[k].tobytes() == b[0].tensors[k].tobytes() for k in a[0].tensors)

    def test_step_count(self):
        gan, real = toy_pairs(n=7)
        _, state, hist = train_attack(gan, real, TrainConfig(batch_size=3, epochs=2),
                                      latent_channels=3, widths=TINY)
        assert state.t == len(hist) == 6

    def test_resume_matches_uninterrupted(self, tmp_path):
        gan, real = toy_pairs(n=8)
        cfg = TrainConfig(batch_size=3, epochs=3, seed=1)
        full_p, full_s, full_h = train_attack(gan, real, cfg, latent_channels=3, widths=TINY)
        assert len(full_h) == 9
        p, s, h1 = train_attack(gan, real, cfg, latent_channels=3, widths=TINY, max_steps=4)
        assert s.t == 4
        save_checkpoint(p, s, tmp_path / "mid.ckpt")
        p2, s2 = load_checkpoint(tmp_path / "mid.ckpt")
        p3, s3, h2 = train_attack(gan, real, cfg, params=p2, state=s2)
        assert h1 + h2 == full_h
        assert s3.t == full_s.t
        for k in full_p.tensors:
            assert p3.tensors[k].tobytes() == full_p.tensors[k].tobytes()

    def test_remover_reduces_l1(self):
        _, real = toy_pairs(n=8)
        _, _, hist = train_remover(real, TrainConfig(batch_size=4, epochs=15, lr0=3e-3),
                                   latent_channels=3, widths=TINY)
        assert np.mean(hist[-4:]) < np.mean(hist[:4])

    def test_attack_reduces_loss(self):
        gan, real = toy_pairs(n=8)
        _, _, hist = train_attack(gan, real, TrainConfig(batch_size=4, epochs=15, lr0=3e-3),
                                  latent_channels=3, widths=TINY)
        assert np.mean(hist[-4:]) < np.mean(hist[:4])

    def test_nan_input_diverges_with_checkpoint(self, tmp_path):
        gan, real = toy_pairs(n=4)
        real = real.copy()
        real[0, 0, 0, 0] = np.nan
        path = tmp_path / "last.ckpt"
        with pytest.raises((TrainingDiverged, ValueError)):
            train_attack(gan, real, TrainConfig(batch_size=4, epochs=1), latent_channels=3,
                         widths=TINY, checkpoint_path=path)

    def test_diverged_gradient_keeps_last_good(self, tmp_path, monkeypatch):
        import ganattack.train as tr
        gan, real = toy_pairs(n=8)
        calls = {"n": 0}
        real_step = tr.adamw_step

        def flaky(params, grads, state, lr, cfg):
            calls["n"] += 1
            if calls["n"] == 2:
                raise FloatingPointError("non-finite gradient")
            return real_step(params, grads, state, lr, cfg)

        monkeypatch.setattr(tr, "adamw_step", flaky)
        path = tmp_path / "last.ckpt"
        with pytest.raises(TrainingDiverged) as exc:
            train_attack(gan, real, TrainConfig(batch_size=4, epochs=2), latent_channels=3,
                         widths=TINY, checkpoint_path=path)
        assert exc.value.state.t == 1
        _, s = load_checkpoint(path)
        assert s.t == 1

    def test_shape_errors(self):
        gan, real = toy_pairs()
        with pytest.raises(DimensionError):
            train_attack(gan, real[:, :, :4], TrainConfig())
        with pytest.raises(ValueError):
            train_attack(gan[:0], real[:0], TrainConfig())


class TestCheckpointFiles:
    def test_roundtrip_with_state(self, tmp_path):
        gan, real = toy_pairs()
        p, s, _ = train_attack(gan, real, TrainConfig(batch_size=3, epochs=1), latent_channels=3, widths=TINY)
        save_checkpoint(p, s, tmp_path / "c.ckpt")
        p2, s2 = load_checkpoint(tmp_path / "c.ckpt")
        assert s2.t == s.t
        for k in p.tensors:
            assert p2.tensors[k].tobytes() == p.tensors[k].tobytes()
            assert s2.m[k].tobytes() == s.m[k].tobytes()
            assert s2.v[k].tobytes() == s.v[k].tobytes()

    def test_params_only(self, tmp_path):
        p = build_attack_model(3, widths=TINY)
        save_checkpoint(p, None, tmp_path / "c.ckpt")
        _, s = load_checkpoint(tmp_path / "c.ckpt")
        assert s is None

    def test_truncated_file(self, tmp_path):
        p = build_attack_model(3, widths=TINY)
        save_checkpoint(p, AdamWState.zeros_like(p), tmp_path / "c.ckpt")
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) - 9])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.ckpt")
