"""Trainer: optimizer oracles, step/loop determinism, checkpoint resume,
conversion plumbing."""

import json
import math

import numpy as np
import pytest
import torch

from dgvc import schedule as S
from dgvc import trainer as T
from dgvc.features import compute_speaker_stats
from dgvc.nets import DiscriminatorSpec, GeneratorSpec

MICRO_G = GeneratorSpec(base_channels=4, n_resblocks=1, latent_dim=8, time_embed_dim=8)
MICRO_D = DiscriminatorSpec(base_channels=4, n_layers=2, time_embed_dim=8)


def micro_config(**overrides) -> T.TrainConfig:
    base = dict(
        iterations=4,
        batch_size=2,
        g_lr=1e-3,
        d_lr=1e-3,
        optimizer="adam",
        t_diff=2,
        latent_dim=8,
        crop_len=32,
        seed=5,
        checkpoint_every=2,
    )
    base.update(overrides)
    return T.TrainConfig(**base)


def micro_sched() -> S.DiffusionSchedule:
    return S.make_schedule(2, 0.6, 0.98)


def micro_state(corpus, **overrides) -> T.TrainState:
    cx, cy, _ = corpus
    cfg = micro_config(**overrides)
    return T.init_train_state(
        cfg,
        MICRO_G,
        MICRO_D,
        micro_sched(),
        compute_speaker_stats(cx.train),
        compute_speaker_stats(cy.train),
    )


def micro_batches(seed=0, b=2, q=35, t=32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, q, t, generator=g), torch.randn(b, q, t, generator=g)


class TestOptimizerStep:
    def test_zero_momentum_unit_lr(self):
        p = {"w": torch.tensor([1.0, 2.0])}
        g = {"w": torch.ones(2)}
        m = {"w": torch.zeros(2)}
        new_p, new_m = T.optimizer_step(p, g, m, lr=1.0, momentum=0.0)
        torch.testing.assert_close(new_p["w"], torch.tensor([0.0, 1.0]))
        torch.testing.assert_close(new_m["w"], torch.ones(2))

    def test_second_update_magnitude_with_momentum_half(self):
        p = {"w": torch.zeros(1, dtype=torch.float64)}
        g = {"w": torch.ones(1, dtype=torch.float64)}
        m = {"w": torch.zeros(1, dtype=torch.float64)}
        lr = 0.1
        p1, m1 = T.optimizer_step(p, g, m, lr, 0.5)
        p2, _ = T.optimizer_step(p1, g, m1, lr, 0.5)
        second_update = float(p1["w"] - p2["w"])
        assert math.isclose(second_update, 1.5 * lr, rel_tol=1e-12)

    def test_scalar_recurrence_oracle_ten_steps(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=10)
        lr, momentum = 0.07, 0.5

        # brute-force scalar simulation
        p_ref, v_ref = 0.3, 0.0
        trace = []
        for g in grads:
            v_ref = momentum * v_ref + g
            p_ref = p_ref - lr * v_ref
            trace.append(p_ref)

        p = {"w": torch.tensor([0.3], dtype=torch.float64)}
        m = {"w": torch.zeros(1, dtype=torch.float64)}
        for g, expected in zip(grads, trace):
            p, m = T.optimizer_step(p, {"w": torch.tensor([g])}, m, lr, momentum)
            assert math.isclose(float(p["w"]), expected, rel_tol=1e-12)

    def test_adam_scalar_oracle(self):
        lr, b1, b2, eps = 0.01, 0.5, 0.999, 1e-8
        rng = np.random.default_rng(1)
        grads = rng.normal(size=6)

        p_ref, m_ref, v_ref = 0.2, 0.0, 0.0
        p = {"w": torch.tensor([0.2], dtype=torch.float64)}
        m = {"w": torch.zeros(1, dtype=torch.float64)}
        v = {"w": torch.zeros(1, dtype=torch.float64)}
        for i, g in enumerate(grads, start=1):
            m_ref = b1 * m_ref + (1 - b1) * g
            v_ref = b2 * v_ref + (1 - b2) * g * g
            p_ref = p_ref - lr * (m_ref / (1 - b1**i)) / (
                math.sqrt(v_ref / (1 - b2**i)) + eps
            )
            p, m, v = T.adam_step(p, {"w": torch.tensor([g])}, m, v, i, lr, b1, b2, eps)
            assert math.isclose(float(p["w"]), p_ref, rel_tol=1e-12)


def snapshot_params(state: T.TrainState) -> dict[str, torch.Tensor]:
    out = {}
    for net, module in state.modules().items():
        for name, p in module.named_parameters():
            out[f"{net}.{name}"] = p.detach().clone()
    return out


def assert_params_equal(a: dict, b: dict, equal=True):
    same = all(torch.equal(a[k], b[k]) for k in a)
    assert same if equal else not same


class TestTrainStep:
    def test_zero_lr_leaves_params_bitwise(self, small_corpus):
        state = micro_state(small_corpus, g_lr=0.0, d_lr=0.0)
        before = snapshot_params(state)
        bx, by = micro_batches()
        T.train_step(state, bx, by)
        assert_params_equal(before, snapshot_params(state))

    def test_same_seed_identical_reports(self, small_corpus):
        reports = []
        for _ in range(2):
            state = micro_state(small_corpus)
            bx, by = micro_batches()
            _, r_xy, r_yx = T.train_step(state, bx, by)
            reports.append((r_xy, r_yx))
        assert reports[0] == reports[1]

    def test_shape_mismatch_rejected_before_update(self, small_corpus):
        state = micro_state(small_corpus)
        before = snapshot_params(state)
        bx, by = micro_batches()
        with pytest.raises(ValueError, match="batch shapes"):
            T.train_step(state, bx, by[:, :, :16])
        assert_params_equal(before, snapshot_params(state))

    def test_discriminator_step_never_touches_generators(self, small_corpus):
        state = micro_state(small_corpus, g_lr=0.0, d_lr=1e-3)
        g_before = {
            k: v for k, v in snapshot_params(state).items() if k.startswith("g_")
        }
        d_before = {
            k: v for k, v in snapshot_params(state).items() if k.startswith("d_")
        }
        bx, by = micro_batches(1)
        T.train_step(state, bx, by)
        after = snapshot_params(state)
        assert all(torch.equal(after[k], g_before[k]) for k in g_before)
        assert any(not torch.equal(after[k], d_before[k]) for k in d_before)

    def test_generator_step_never_touches_discriminators(self, small_corpus):
        state = micro_state(small_corpus, g_lr=1e-3, d_lr=0.0)
        d_before = {
            k: v for k, v in snapshot_params(state).items() if k.startswith("d_")
        }
        bx, by = micro_batches(2)
        T.train_step(state, bx, by)
        after = snapshot_params(state)
        assert all(torch.equal(after[k], d_before[k]) for k in d_before)

    def test_nonfinite_generator_output_diverges_with_name(self, small_corpus):
        state = micro_state(small_corpus)
        with torch.no_grad():
            state.g_xy.head.weight.fill_(float("nan"))
        bx, by = micro_batches(3)
        with pytest.raises(T.TrainingDiverged, match="g_xy"):
            T.train_step(state, bx, by)

    def test_loss_report_identities(self, small_corpus):
        state = micro_state(small_corpus)
        bx, by = micro_batches(4)
        _, r_xy, r_yx = T.train_step(state, bx, by)
        cfg = state.config
        for r in (r_xy, r_yx):
            assert math.isclose(
                r.total_g,
                r.g_adv + cfg.lambda_cyc * r.g_cyc + cfg.lambda_id * r.g_id,
                rel_tol=1e-12,
            )
            assert math.isclose(r.total_d, r.d_loss_real + r.d_loss_fake, rel_tol=1e-12)
            assert 1 <= r.t_sampled <= cfg.t_diff

    def test_identity_annealing_switches_off(self, small_corpus):
        state = micro_state(small_corpus, iterations=4, id_anneal_steps=2)
        bx, by = micro_batches(5)
        g_ids = []
        for _ in range(4):
            _, r_xy, _ = T.train_step(state, bx, by)
            g_ids.append(r_xy.g_id)
        assert g_ids[0] > 0.0 and g_ids[1] > 0.0
        assert g_ids[2] == 0.0 and g_ids[3] == 0.0


class TestCheckpointResume:
    def test_state_roundtrip_bitwise(self, small_corpus, tmp_path):
        state = micro_state(small_corpus)
        bx, by = micro_batches(6)
        T.train_step(state, bx, by)
        path = tmp_path / "s.ckpt"
        T.save_train_state(state, path)
        back = T.load_train_state(path)
        assert back.step == state.step
        assert back.config == state.config
        assert_params_equal(snapshot_params(state), snapshot_params(back))
        for key, val in state.opt_state.items():
            torch.testing.assert_close(back.opt_state[key], val, rtol=0, atol=0)
        np.testing.assert_array_equal(back.sched.betas, state.sched.betas)
        np.testing.assert_array_equal(back.stats_x.mcep_mean, state.stats_x.mcep_mean)

    def test_resumed_steps_equal_uninterrupted(self, small_corpus, tmp_path):
        bx, by = micro_batches(7)

        straight = micro_state(small_corpus)
        for _ in range(4):
            T.train_step(straight, bx, by)

        broken = micro_state(small_corpus)
        for _ in range(2):
            T.train_step(broken, bx, by)
        path = tmp_path / "mid.ckpt"
        T.save_train_state(broken, path)
        resumed = T.load_train_state(path)
        for _ in range(2):
            T.train_step(resumed, bx, by)

        assert_params_equal(snapshot_params(straight), snapshot_params(resumed))


class TestTrainLoop:
    def test_zero_iterations_initial_checkpoint_only(self, small_corpus, tmp_path):
        cx, cy, _ = small_corpus
        cfg = micro_config(iterations=0)
        res = T.train_loop(cfg, cx.train, cy.train, tmp_path, MICRO_G, MICRO_D, micro_sched())
        ckpts = sorted(tmp_path.glob("checkpoint_*.ckpt"))
        assert [p.name for p in ckpts] == ["checkpoint_000000.ckpt"]
        assert res.final_checkpoint == ckpts[0]

    def test_two_runs_identical(self, small_corpus, tmp_path):
        cx, cy, _ = small_corpus
        cfg = micro_config(iterations=4)
        res_a = T.train_loop(cfg, cx.train, cy.train, tmp_path / "a", MICRO_G, MICRO_D, micro_sched())
        res_b = T.train_loop(cfg, cx.train, cy.train, tmp_path / "b", MICRO_G, MICRO_D, micro_sched())
        assert_params_equal(snapshot_params(res_a.state), snapshot_params(res_b.state))
        recs_a = [json.loads(l) for l in open(res_a.metrics_path)]
        recs_b = [json.loads(l) for l in open(res_b.metrics_path)]
        for ra, rb in zip(recs_a, recs_b):
            assert ra["x2y"] == rb["x2y"] and ra["y2x"] == rb["y2x"]

    def test_loop_resume_equals_uninterrupted(self, small_corpus, tmp_path):
        cx, cy, _ = small_corpus
        cfg = micro_config(iterations=4, checkpoint_every=2)
        res_full = T.train_loop(cfg, cx.train, cy.train, tmp_path / "full", MICRO_G, MICRO_D, micro_sched())

        # interrupted: run only 2 iterations, then resume to 4
        cfg_half = micro_config(iterations=2, checkpoint_every=2)
        T.train_loop(cfg_half, cx.train, cy.train, tmp_path / "part", MICRO_G, MICRO_D, micro_sched())
        mid = tmp_path / "part" / "checkpoint_000002.ckpt"
        # the saved config says iterations=2; rewrite through a fresh run with
        # the full horizon resuming from the midpoint requires matching config
        with pytest.raises(ValueError, match="different config"):
            T.train_loop(cfg, cx.train, cy.train, tmp_path / "bad", resume_from=mid)

        # proper interrupt: same full config, checkpoint at step 2 exists
        res_interrupted = T.train_loop(
            cfg,
            cx.train,
            cy.train,
            tmp_path / "resumed",
            resume_from=tmp_path / "full" / "checkpoint_000002.ckpt",
        )
        assert_params_equal(
            snapshot_params(res_full.state), snapshot_params(res_interrupted.state)
        )

    def test_short_utterances_rejected(self, small_corpus, tmp_path):
        cx, cy, _ = small_corpus
        cfg = micro_config(crop_len=96)  # longer than the shortest utterance
        with pytest.raises(ValueError, match="shorter than crop_len"):
            T.train_loop(cfg, cx.train, cy.train, tmp_path, MICRO_G, MICRO_D, micro_sched())


class TestConvert:
    def test_shape_ap_and_logf0(self, small_corpus):
        cx, cy, om = small_corpus
        state = micro_state(small_corpus)
        src = cx.heldout[0]
        rng = torch.Generator().manual_seed(0)
        outs = T.convert(src, "x2y", state, rng=rng, n_samples=2)
        assert len(outs) == 2
        for out in outs:
            assert out.mcep.shape == src.mcep.shape
            assert out.ap == src.ap
            np.testing.assert_array_equal(out.voiced, src.voiced)
            # voiced frames moved towards target stats, unvoiced untouched
            assert not np.allclose(out.logf0[out.voiced], src.logf0[src.voiced])
            np.testing.assert_array_equal(out.logf0[~out.voiced], src.logf0[~src.voiced])

    def test_samples_differ_and_are_seed_deterministic(self, small_corpus):
        cx, _, _ = small_corpus
        state = micro_state(small_corpus)
        src = cx.heldout[0]
        a, b = T.convert(src, "x2y", state, rng=torch.Generator().manual_seed(1), n_samples=2)
        assert float(np.linalg.norm(a.mcep - b.mcep)) > 0.0
        a2, b2 = T.convert(src, "x2y", state, rng=torch.Generator().manual_seed(1), n_samples=2)
        np.testing.assert_array_equal(a.mcep, a2.mcep)
        np.testing.assert_array_equal(b.mcep, b2.mcep)

    def test_identity_stub_generator_plumbing(self, small_corpus):
        """With a generator that returns its input, the chain must equal the
        raw schedule recursion ending in the final state's prediction."""
        cx, _, _ = small_corpus
        state = micro_state(small_corpus)
        state.g_xy = lambda x, z, t: x
        src = cx.heldout[0]

        out = T.convert(src, "x2y", state, rng=torch.Generator().manual_seed(3))[0]

        from dgvc.features import denormalize_mcep, normalize_mcep

        rng = torch.Generator().manual_seed(3)
        x = torch.as_tensor(
            normalize_mcep(src.mcep, state.stats_x), dtype=torch.float32
        )
        x = S.forward_marginal_sample(x, 2, state.sched, eps=torch.randn(x.shape, generator=rng))
        for t in range(2, 0, -1):
            _ = torch.randn((state.gen_spec.latent_dim,), generator=rng)  # z draw
            x, _unused = S.denoise_step(
                x, t, lambda s, z, tt: s, None, state.sched,
                eps=None if t == 1 else torch.randn(x.shape, generator=rng),
            )
        expected = denormalize_mcep(x.numpy().astype(np.float64), state.stats_y).astype(np.float32)
        np.testing.assert_array_equal(out.mcep, expected)

    def test_direction_validation(self, small_corpus):
        cx, _, _ = small_corpus
        state = micro_state(small_corpus)
        with pytest.raises(ValueError, match="direction"):
            T.convert(cx.heldout[0], "xy", state, rng=torch.Generator())

    def test_schedule_mismatch_fatal(self, small_corpus):
        cx, _, _ = small_corpus
        state = micro_state(small_corpus)
        other = S.make_schedule(4)
        with pytest.raises(ValueError, match="does not match"):
            T.convert(cx.heldout[0], "x2y", state, sched=other, rng=torch.Generator())

    def test_indivisible_length_fatal(self, small_corpus):
        cx, _, _ = small_corpus
        state = micro_state(small_corpus)
        src = cx.heldout[0]
        from dgvc.features import FeatureSequence

        trimmed = FeatureSequence(
            mcep=src.mcep[:, :-1],
            logf0=src.logf0[:-1],
            voiced=src.voiced[:-1],
            ap=src.ap,
        )
        with pytest.raises(ValueError, match="not divisible"):
            T.convert(trimmed, "x2y", state, rng=torch.Generator())
