import numpy as np
import pytest

import oracles
from waver import train as tr
from waver.distill import build_corpus
from waver.encoders import ToyEncoder
from waver.exceptions import InsufficientData, InvalidConfig, NonPositiveTemperature, NonSquare, NumericError
from waver.numerics import Tensor, backward, l2_normalize_rows
from waver.train import (
    TAU_MAX,
    TAU_MIN,
    ProjectionHead,
    TrainConfig,
    infonce_t2v,
    infonce_total,
    infonce_v2t,
    init_heads,
    load_checkpoint,
    project_and_pool,
    read_trace,
    save_checkpoint,
    train_loop,
    write_trace,
)
from waver.vcd import build_dictionary

from test_numerics import fd_grad, rel_err


@pytest.fixture(scope="module")
def setup(tiny_dataset):
    enc = ToyEncoder(dim=16)
    corpus = build_corpus(build_dictionary(tiny_dataset, enc, kappa=3), enc)
    return tiny_dataset, corpus, enc


def small_config(**kw):
    base = dict(batch_size=8, epochs=1, learning_rate=0.01, optimizer="adam", seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestHead:
    def test_identity_head_returns_normalised_mean(self, rng):
        head = ProjectionHead(6, d_proj=6, hidden_dims=(6, 6), init="identity")
        frames = rng.normal(size=(5, 6))
        out = project_and_pool(frames, head).data
        mean = frames.mean(axis=0, keepdims=True)
        np.testing.assert_allclose(out, mean / np.linalg.norm(mean), atol=1e-9)

    def test_output_rows_are_unit(self, rng):
        head = ProjectionHead(16, d_proj=4, rng=rng)
        out = head(rng.normal(size=(7, 16))).data
        assert out.shape == (7, 4)
        assert np.abs(np.linalg.norm(out, axis=1) - 1).max() < 1e-12

    def test_parameter_gradients_match_finite_differences(self, rng):
        vh, th = ProjectionHead(8, d_proj=4, rng=rng, prefix="v"), ProjectionHead(8, d_proj=4, rng=rng, prefix="t")
        for b in vh.params[1::2] + th.params[1::2]:
            b.data = rng.normal(0, 0.5, size=b.shape)  # a generic point away from the ReLU plateau
        xv, xt = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))

        def loss():
            return infonce_total(th(xt) @ vh(xv).T, 0.3)

        params = vh.params + th.params
        grads = backward(loss(), params)
        for p, g in zip(params, grads):
            num = fd_grad(lambda: loss().item(), p.data)
            assert rel_err(g, num) < 1e-4, p.name

    def test_bad_shapes(self):
        with pytest.raises(InvalidConfig):
            ProjectionHead(4, d_proj=8)
        with pytest.raises(InvalidConfig):
            ProjectionHead(4, init="identity")

    def test_whitening_decorrelates(self, rng):
        x = rng.normal(size=(400, 3)) @ np.array([[3.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.2]])
        head = ProjectionHead(3).fit_input_scaler(x, eps=0.0)
        z = (x - head.input_mean) @ head.input_scale
        np.testing.assert_allclose(z.T @ z / len(z), np.eye(3), atol=1e-8)


class TestLoss:
    def test_uniform_similarities(self):
        assert abs(infonce_total(np.zeros((4, 4)), 0.07) - oracles.LN4) < 1e-12
        assert abs(infonce_total(np.full((3, 3), 0.4), 1.0) - oracles.LN3) < 1e-12

    def test_two_by_two(self):
        sim = np.array(oracles.SIM_2X2)
        assert abs(infonce_t2v(sim, 1.0) - oracles.T2V_2X2) < 1e-9
        assert abs(infonce_v2t(sim, 1.0) - oracles.V2T_2X2) < 1e-9
        assert abs(infonce_total(sim, 1.0) - oracles.TOTAL_2X2) < 1e-9

    def test_low_temperature_separation(self, rng):
        sim = rng.uniform(-1, 0.5, size=(6, 6))
        np.fill_diagonal(sim, 0.9)
        assert infonce_total(sim, 0.01) < 1e-6

    def test_joint_permutation_invariance(self, rng):
        sim = rng.uniform(-1, 1, size=(5, 5))
        perm = rng.permutation(5)
        assert abs(infonce_total(sim[perm][:, perm], 0.2) - infonce_total(sim, 0.2)) < 1e-12

    def test_errors(self):
        with pytest.raises(NonSquare):
            infonce_total(np.zeros((2, 3)), 0.1)
        with pytest.raises(NonPositiveTemperature):
            infonce_total(np.zeros((2, 2)), 0.0)

    def test_tau_gradient(self, rng):
        data = rng.uniform(-1, 1, size=(4, 4))
        tau = Tensor(0.2, True)
        (g,) = backward(infonce_total(Tensor(data), tau), [tau])
        num = (infonce_total(data, 0.2 + 1e-6) - infonce_total(data, 0.2 - 1e-6)) / 2e-6
        assert abs(float(g) - num) < 1e-6


class TestLoop:
    def test_zero_steps_equals_init(self, setup):
        cfg = small_config(max_steps=0)
        res = train_loop(*setup, cfg)
        vh, th = init_heads(16, cfg)
        assert res.trace == [] and res.tau == cfg.tau_init
        for a, b in zip(res.video_head.params + res.text_head.params, vh.params + th.params):
            assert np.array_equal(a.data, b.data)

    def test_same_seed_identical_trace(self, setup):
        a = train_loop(*setup, small_config(epochs=3))
        b = train_loop(*setup, small_config(epochs=3))
        assert a.trace == b.trace and len(a.trace) == 12
        c = train_loop(*setup, small_config(epochs=3, seed=4))
        assert c.trace != a.trace

    def test_loss_decreases(self, setup):
        res = train_loop(*setup, small_config(epochs=10))
        first, last = np.mean([t[1] for t in res.trace[:4]]), np.mean([t[1] for t in res.trace[-4:]])
        assert last < first

    def test_tau_stays_clamped(self, setup):
        res = train_loop(*setup, small_config(optimizer="sgd", learning_rate=50.0, epochs=2))
        assert all(TAU_MIN <= t[2] <= TAU_MAX for t in res.trace)

    def test_insufficient_data(self, setup):
        with pytest.raises(InsufficientData):
            train_loop(*setup, small_config(batch_size=37))

    def test_invalid_config(self, setup):
        for bad in (dict(batch_size=1), dict(learning_rate=0.0), dict(tau_init=0.0), dict(optimizer="rmsprop")):
            with pytest.raises(InvalidConfig):
                train_loop(*setup, small_config(**bad))

    def test_nan_raises(self, setup, monkeypatch):
        monkeypatch.setattr(tr, "text_inputs", lambda *a, **k: np.full((36, 16), np.nan))
        with pytest.raises(NumericError):
            train_loop(*setup, small_config(standardize=False))

    def test_callback(self, setup):
        seen = []
        train_loop(*setup, small_config(max_steps=3), on_step=lambda *row: seen.append(row))
        assert [s for s, _, _ in seen] == [1, 2, 3]


class TestPersistence:
    def test_checkpoint_round_trip(self, setup, tmp_path):
        res = train_loop(*setup, small_config(max_steps=5))
        save_checkpoint(tmp_path / "m.ckpt", res, pooling="last")
        back, pooling = load_checkpoint(tmp_path / "m.ckpt")
        assert pooling == "last" and back.tau == res.tau
        for a, b in zip(res.video_head.params + res.text_head.params, back.video_head.params + back.text_head.params):
            assert a.name == b.name
            np.testing.assert_allclose(a.data, b.data, rtol=1e-6, atol=1e-6)
        x = np.random.default_rng(0).normal(size=(3, 16))
        np.testing.assert_allclose(res.video_head(x).data, back.video_head(x).data, atol=1e-4)

    def test_trace_round_trip(self, tmp_path):
        trace = [(1, 0.123456789012345, 0.07), (2, 1e-300, 0.5)]
        write_trace(tmp_path / "t.csv", trace)
        assert read_trace(tmp_path / "t.csv") == trace

    def test_normalized_rows_helper(self, rng):
        out = l2_normalize_rows(rng.normal(size=(3, 4)))
        assert np.allclose(np.linalg.norm(out, axis=1), 1)
