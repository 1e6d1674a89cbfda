"""Training loop, warmup contract, optimizer and checkpoint round trips."""

from dataclasses import replace

import numpy as np
import pytest

from ffs import datakit as dk
from ffs import flow as fl
from ffs import trainer as tr
from ffs.errors import FormatError, InvalidArgument, NumericOverflow
from ffs.heads import LossWeights
from ffs.synthesis import SynthesisConfig


@pytest.fixture(scope="module")
def tiny_data():
    train, _, _ = dk.generate(dk.DatasetSpec(n_per_class=40, n_background=20, seed=1))
    return train


def tiny_cfg(**kw):
    base = dict(total_iters=30, warmup_iters=15, batch_size=32, M=1, H=1, W=8, head_hidden=(8,),
                synthesis=SynthesisConfig(k=20, s=2), weights=LossWeights(alpha=0.5, beta=1.0))
    base.update(kw)
    return tr.TrainConfig(**base)


class TestConfig:
    def test_default_warmup(self):
        assert tr.TrainConfig(total_iters=2000).warmup_iters == 1200
        assert tr.TrainConfig(total_iters=7).warmup_iters == 4

    @pytest.mark.parametrize("kw", [dict(warmup_iters=11, total_iters=10), dict(batch_size=1),
                                    dict(lr_heads=0.0), dict(optimizer="rmsprop"),
                                    dict(warmup_iters=-1)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            tr.TrainConfig(**kw)


class TestOptimizer:
    def test_adam_first_step(self):
        # the bias-corrected first step moves by lr * sign(g), up to eps
        opt = tr.Optimizer("adam")
        out = opt.step("p", np.array([1.0, -2.0]), np.array([0.3, -5.0]), 0.1)
        np.testing.assert_allclose(out, [0.9, -1.9], atol=1e-8)

    def test_adam_reference(self):
        opt = tr.Optimizer("adam")
        p, m, v = np.array([0.5]), 0.0, 0.0
        ref = p.copy()
        for t, g in enumerate([0.2, -0.1, 0.4], start=1):
            p = opt.step("p", p, np.array([g]), 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-14)

    def test_step_counts_per_key(self):
        opt = tr.Optimizer("adam")
        opt.step("a", np.zeros(1), np.ones(1), 0.1)
        opt.step("a", np.zeros(1), np.ones(1), 0.1)
        opt.step("b", np.zeros(1), np.ones(1), 0.1)
        assert opt.slots["a"][0] == 2 and opt.slots["b"][0] == 1

    def test_sgd(self):
        out = tr.Optimizer("sgd").step("p", np.array([1.0]), np.array([2.0]), 0.25)
        np.testing.assert_array_equal(out, [0.5])


class TestWarmup:
    def test_instrumented(self, tiny_data):
        cfg = tiny_cfg()
        log = []

        def cb(state, info):
            log.append((info["iteration"], info["warmup"], info["outliers"] is not None,
                        state.synthesis_calls, state.bundle.phi.u, state.bundle.phi.v))

        state = tr.train(tiny_data, cfg, callback=cb)
        for i, warm, has_outliers, calls, u, v in log:
            if i <= cfg.warmup_iters:
                assert warm and not has_outliers and calls == 0 and (u, v) == (-1.0, 0.0)
            else:
                assert not warm and has_outliers and calls == i - cfg.warmup_iters
        assert state.synthesis_calls == cfg.total_iters - cfg.warmup_iters
        assert log[-1][4:] != (-1.0, 0.0)

    def test_full_warmup_keeps_psi(self, tiny_data):
        state = tr.train(tiny_data, tiny_cfg(warmup_iters=30))
        assert (state.bundle.phi.u, state.bundle.phi.v) == (-1.0, 0.0)
        np.testing.assert_array_equal(state.bundle.energy.r, 0.0)
        assert all(h[3] == 0.0 for h in state.history)

    def test_frozen_flow(self, tiny_data):
        seen = {}

        def cb(state, info):
            seen.setdefault("first", state.flow.get_params().copy())

        state = tr.train(tiny_data, tiny_cfg(warmup_iters=30, lr_flow=0.0,
                                             weights=LossWeights(0.0, 0.0)), callback=cb)
        np.testing.assert_array_equal(state.flow.get_params(), seen["first"])


class TestTrain:
    def test_history_shape(self, tiny_data):
        state = tr.train(tiny_data, tiny_cfg())
        h = np.array(state.history)
        assert h.shape == (30, 5)
        np.testing.assert_array_equal(h[:, 0], np.arange(1, 31))
        np.testing.assert_allclose(h[:, 4], h[:, 1] + 1.0 * h[:, 2] + 0.5 * h[:, 3], rtol=1e-12)

    @pytest.mark.parametrize("mode", ["rejection", "projection", "vos", "vos_plus"])
    def test_modes_run(self, tiny_data, mode):
        scfg = SynthesisConfig(mode=mode, k=20, s=2, max_steps=20)
        state = tr.train(tiny_data, tiny_cfg(synthesis=scfg, total_iters=20, warmup_iters=10))
        assert state.iteration == 20 and state.synthesis_calls == 10

    def test_deterministic(self, tiny_data):
        a = tr.checkpoint_bytes(tr.train(tiny_data, tiny_cfg()))
        b = tr.checkpoint_bytes(tr.train(tiny_data, tiny_cfg()))
        assert a == b

    def test_seed_changes_result(self, tiny_data):
        a = tr.train(tiny_data, tiny_cfg(seed=0)).flow.get_params()
        b = tr.train(tiny_data, tiny_cfg(seed=1)).flow.get_params()
        assert not np.array_equal(a, b)

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        full = tiny_cfg(total_iters=40, warmup_iters=10)
        ref = tr.train(tiny_data, full)
        part = tr.train(tiny_data, replace(full, total_iters=25))
        tr.save_checkpoint(part, tmp_path / "mid.ffsc")
        resumed = tr.train(tiny_data, full, state=tr.load_checkpoint(tmp_path / "mid.ffsc"))
        assert tr.checkpoint_bytes(resumed) == tr.checkpoint_bytes(ref)

    def test_missing_class(self, tiny_data):
        data = tiny_data.subset(tiny_data.labels != 1)
        data.K = 3
        with pytest.raises(InvalidArgument, match="class 1"):
            tr.train(data, tiny_cfg())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort(self, tiny_data):
        cfg = tiny_cfg(optimizer="sgd", lr_heads=1e305)
        with pytest.raises(NumericOverflow, match="not finite at iteration") as exc:
            tr.train(tiny_data, cfg)
        it, component = exc.value.where
        assert it <= 2 and component in ("det", "nll", "reg", "total", "heads")


@pytest.fixture(scope="module")
def state(tiny_data):
    return tr.train(tiny_data, tiny_cfg())


class TestCheckpoint:
    def test_round_trip(self, state, tmp_path):
        tr.save_checkpoint(state, tmp_path / "c.ffsc")
        back = tr.load_checkpoint(tmp_path / "c.ffsc")
        x = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_array_equal(fl.log_prob(back.flow, x), fl.log_prob(state.flow, x))
        np.testing.assert_array_equal(back.bundle.get_params(), state.bundle.get_params())
        assert back.history == state.history and back.iteration == state.iteration
        assert tr.checkpoint_bytes(back) == tr.checkpoint_bytes(state)

    def test_bad_magic(self, state, tmp_path):
        raw = bytearray(tr.checkpoint_bytes(state))
        raw[0] ^= 0xFF
        (tmp_path / "c.ffsc").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as exc:
            tr.load_checkpoint(tmp_path / "c.ffsc")
        assert exc.value.offset == 0

    def test_version(self, state):
        raw = bytearray(tr.checkpoint_bytes(state))
        raw[4] = 9
        with pytest.raises(FormatError, match="version"):
            tr.state_from_bytes(bytes(raw))

    @pytest.mark.parametrize("cut", [3, 20, 200, -9])
    def test_truncated(self, state, cut):
        raw = tr.checkpoint_bytes(state)
        with pytest.raises(FormatError) as exc:
            tr.state_from_bytes(raw[:cut])
        assert 0 <= exc.value.offset <= len(raw)

    def test_trailing(self, state):
        with pytest.raises(FormatError, match="trailing"):
            tr.state_from_bytes(tr.checkpoint_bytes(state) + b"\0")


class TestTrainFlow:
    def test_nll_decreases(self, crescent_data):
        x = crescent_data[0].inliers().features
        model = fl.init_flow("RealNVP", 2, 2, 1, 16, tr.SeededRng(0))
        losses, evals = tr.train_flow(model, x, iters=200, eval_every=50)
        assert [s for s, _ in evals] == [50, 100, 150, 200]
        assert np.mean(losses[-20:]) < np.mean(losses[:20]) - 0.5


def test_energies_helper(tiny_data):
    state = tr.train(tiny_data, tiny_cfg(total_iters=2, warmup_iters=2))
    e, logits = tr.energies(state.bundle, tiny_data.features[:5])
    assert e.shape == (5,) and logits.shape == (5, 4)
