"""Invertible steps, exact log-determinants, NLL, and sequence sampling."""

import numpy as np
import pytest

from facerender.data import generate_clip
from facerender.face import BETA_DIM, MotionFrame
from facerender.flow import (
    FlowConfig,
    NormFlowModel,
    actnorm_forward,
    actnorm_inverse,
    build_condition,
    expression_flow_config,
    generate_sequence,
    linear_forward,
    linear_inverse,
    pose_flow_config,
)
from facerender.rng import Rng
from facerender.tensor import AdamState, Tensor, adam_step, backward, grad_check, no_grad, zero_grads

TINY = FlowConfig(channels=4, num_steps=2, lstm_hidden=8, history=2, lookahead=1, audio_dim=3)


def randomize(model: NormFlowModel, seed: int, scale: float = 0.3) -> None:
    """Perturb parameters the way training would: matrix noise shrinks with
    fan-in so every layer stays well-conditioned."""
    rng = Rng(seed)
    for p in model.parameters():
        std = scale / np.sqrt(p.shape[0]) if p.ndim == 2 else scale
        p.data += rng.normal(*p.shape, std=std)


class TestActnorm:
    def test_identity(self):
        x = Tensor(np.array([[1.0, -2.0]]))
        y, ld = actnorm_forward(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.array_equal(y.data, x.data)
        assert np.all(ld.data == 0.0)

    def test_scale_two(self):
        y, ld = actnorm_forward(Tensor([[1.0, 1.0]]), Tensor([2.0, 2.0]), Tensor([0.0, 0.0]))
        assert np.array_equal(y.data, [[2.0, 2.0]])
        assert abs(ld.data[0] - 2.0 * np.log(2.0)) < 1e-14

    def test_roundtrip(self):
        rng = Rng(90)
        s, b = Tensor(rng.normal(5) + 2.0), Tensor(rng.normal(5))
        x = Tensor(rng.normal(3, 5))
        y, ld_f = actnorm_forward(x, s, b)
        back, ld_i = actnorm_inverse(y, s, b)
        assert np.abs(back.data - x.data).max() < 1e-12
        assert np.abs(ld_f.data + ld_i.data).max() < 1e-12

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            actnorm_forward(Tensor([[1.0]]), Tensor([0.0]), Tensor([0.0]))


def laplace_det(m: np.ndarray) -> float:
    if m.shape == (1, 1):
        return float(m[0, 0])
    total = 0.0
    for j in range(m.shape[1]):
        minor = np.delete(np.delete(m, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * m[0, j] * laplace_det(minor)
    return total


class TestInvertibleLinear:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        y, ld = linear_forward(x, Tensor(np.eye(2)))
        assert np.array_equal(y.data, x.data)
        assert np.all(ld.data == 0.0)

    def test_unit_determinant_diagonal(self):
        y, ld = linear_forward(Tensor([[1.0, 1.0]]), Tensor(np.diag([3.0, 1.0 / 3.0])))
        assert abs(ld.data[0]) < 1e-14

    def test_logdet_matches_laplace_expansion(self):
        rng = Rng(91)
        w = np.eye(4) + 0.5 * rng.normal(4, 4)
        _, ld = linear_forward(Tensor(np.zeros((1, 4))), Tensor(w))
        assert abs(ld.data[0] - np.log(abs(laplace_det(w)))) < 1e-9

    def test_near_singular_rejected(self):
        w = np.eye(3)
        w[2] = w[0]  # rank deficient
        with pytest.raises(ValueError, match="singular"):
            linear_forward(Tensor(np.zeros((1, 3))), Tensor(w))

    def test_roundtrip(self):
        rng = Rng(92)
        w = Tensor(np.eye(3) + 0.4 * rng.normal(3, 3))
        x = Tensor(rng.normal(4, 3))
        y, ld_f = linear_forward(x, w)
        back, ld_i = linear_inverse(y, w)
        assert np.abs(back.data - x.data).max() < 1e-10
        assert np.abs(ld_f.data + ld_i.data).max() < 1e-12


class TestCoupling:
    def test_identity_at_init(self):
        model = NormFlowModel(TINY, seed=1)
        step = model.steps[0]
        x = Tensor(Rng(93).normal(3, 4))
        cond = Tensor(Rng(94).normal(3, TINY.cond_dim))
        y, ld, _ = step.coupling_forward(x, cond, model.init_state(3).pairs[0])
        assert np.array_equal(y.data, x.data)
        assert np.all(ld.data == 0.0)

    def test_passthrough_half_bit_identical(self):
        model = NormFlowModel(TINY, seed=2)
        randomize(model, 7)
        step = model.steps[0]
        rng = Rng(95)
        x = Tensor(rng.normal(3, 4))
        cond = Tensor(rng.normal(3, TINY.cond_dim))
        y, _, _ = step.coupling_forward(x, cond, model.init_state(3).pairs[0])
        assert y.data[:, TINY.split_a:].tobytes() == x.data[:, TINY.split_a:].tobytes()

    def test_roundtrip_with_state_replay(self):
        model = NormFlowModel(TINY, seed=3)
        randomize(model, 8)
        step = model.steps[0]
        rng = Rng(96)
        x = Tensor(rng.normal(3, 4))
        cond = Tensor(rng.normal(3, TINY.cond_dim))
        y, ld_f, state_f = step.coupling_forward(x, cond, model.init_state(3).pairs[0])
        back, ld_i, state_i = step.coupling_inverse(y, cond, model.init_state(3).pairs[0])
        assert np.abs(back.data - x.data).max() < 1e-10
        assert np.abs(ld_f.data + ld_i.data).max() < 1e-12
        # both directions advance the recurrent state identically
        assert np.array_equal(state_f[0].data, state_i[0].data)
        assert np.array_equal(state_f[1].data, state_i[1].data)

    def test_condition_dim_validated(self):
        model = NormFlowModel(TINY, seed=4)
        with pytest.raises(ValueError, match="condition"):
            model.steps[0].coupling_forward(Tensor(np.zeros((1, 4))),
                                            Tensor(np.zeros((1, 3))),
                                            model.init_state(1).pairs[0])


class TestWholeFlow:
    def test_identity_initialized_inverse(self):
        model = NormFlowModel(TINY, seed=5)
        rng = Rng(97)
        p = Tensor(rng.normal(2, 4))
        cond = Tensor(rng.normal(2, TINY.cond_dim))
        n, ld, _ = model.flow_inverse(p, cond, model.init_state(2))
        assert np.array_equal(n.data, p.data)
        assert np.all(ld.data == 0.0)

    @pytest.mark.parametrize("make_cfg", [expression_flow_config, pose_flow_config])
    def test_roundtrip_real_configs(self, make_cfg):
        cfg = make_cfg(lstm_hidden=16)
        model = NormFlowModel(cfg, seed=6)
        randomize(model, 9, scale=0.2)
        rng = Rng(98)
        with no_grad():
            for trial in range(5):
                p = Tensor(rng.normal(2, cfg.channels))
                cond = Tensor(rng.normal(2, cfg.cond_dim))
                n, ld_i, _ = model.flow_inverse(p, cond, model.init_state(2))
                back, ld_f, _ = model.flow_sample(n, cond, model.init_state(2))
                assert np.abs(back.data - p.data).max() < 1e-8
                assert np.abs(ld_f.data + ld_i.data).max() < 1e-9

    def test_sample_zero_latent_identity_init(self):
        model = NormFlowModel(TINY, seed=7)
        cond = Tensor(Rng(99).normal(1, TINY.cond_dim))
        p, _, _ = model.flow_sample(Tensor(np.zeros((1, 4))), cond, model.init_state(1))
        assert np.all(p.data == 0.0)

    def test_bijectivity_probe(self):
        model = NormFlowModel(TINY, seed=8)
        randomize(model, 10)
        rng = Rng(100)
        cond = Tensor(rng.normal(1, TINY.cond_dim))
        n1, n2 = Tensor(rng.normal(1, 4)), Tensor(rng.normal(1, 4))
        p1, _, _ = model.flow_sample(n1, cond, model.init_state(1))
        p2, _, _ = model.flow_sample(n2, cond, model.init_state(1))
        assert not np.allclose(p1.data, p2.data)

    def test_logdet_matches_numerical_jacobian(self):
        cfg = FlowConfig(channels=5, num_steps=3, lstm_hidden=8, history=2, lookahead=1,
                         audio_dim=4)
        model = NormFlowModel(cfg, seed=9)
        randomize(model, 11, scale=0.25)
        rng = Rng(101)
        p0 = rng.normal(1, 5)
        cond = Tensor(rng.normal(1, cfg.cond_dim))

        def encode(vec):
            with no_grad():
                n, ld, _ = model.flow_inverse(Tensor(vec[None, :]), cond, model.init_state(1))
            return n.data[0], ld.data[0]

        _, analytic_ld = encode(p0[0] if p0.ndim == 2 else p0)
        base = p0[0]
        h = 1e-6
        jac = np.zeros((5, 5))
        for j in range(5):
            up = base.copy()
            up[j] += h
            dn = base.copy()
            dn[j] -= h
            jac[:, j] = (encode(up)[0] - encode(dn)[0]) / (2 * h)
        numeric_ld = np.log(abs(np.linalg.det(jac)))
        assert abs(analytic_ld - numeric_ld) / max(abs(numeric_ld), 1e-3) < 1e-3


class TestNll:
    def test_identity_init_at_origin(self):
        model = NormFlowModel(TINY, seed=10)
        cond = Tensor(Rng(102).normal(1, TINY.cond_dim))
        nll, _ = model.nll_loss(Tensor(np.zeros((1, 4))), cond, model.init_state(1))
        assert abs(nll.item() - 2.0 * np.log(2.0 * np.pi)) < 1e-12

    def test_identity_init_quadratic_form(self):
        model = NormFlowModel(TINY, seed=11)
        rng = Rng(103)
        z = rng.normal(1, 4)
        cond = Tensor(rng.normal(1, TINY.cond_dim))
        nll, _ = model.nll_loss(Tensor(z), cond, model.init_state(1))
        expected = 2.0 * np.log(2.0 * np.pi) + 0.5 * (z ** 2).sum()
        assert abs(nll.item() - expected) < 1e-12

    def test_change_of_variables_density_sanity(self):
        model = NormFlowModel(TINY, seed=12)
        rng = Rng(104)
        z = rng.normal(1, 4)
        cond = Tensor(rng.normal(1, TINY.cond_dim))
        nll, _ = model.nll_loss(Tensor(z), cond, model.init_state(1))
        density = np.exp(-nll.item())
        normal = np.exp(-0.5 * (z ** 2).sum()) / (2.0 * np.pi) ** 2
        assert abs(density - normal) < 1e-10

    def test_nll_gradient_finite_differences(self):
        cfg = FlowConfig(channels=4, num_steps=2, lstm_hidden=6, history=2, lookahead=1,
                         audio_dim=3)
        model = NormFlowModel(cfg, seed=13)
        randomize(model, 14, scale=0.2)
        rng = Rng(105)
        p = Tensor(rng.normal(2, 4))
        cond = Tensor(rng.normal(2, cfg.cond_dim))

        def f():
            nll, _ = model.nll_loss(p, cond, model.init_state(2))
            return nll

        rep = grad_check(f, model.parameters(), tol=1e-4, max_entries_per_param=6, rng=Rng(3))
        assert rep.passed, rep

    def test_training_reduces_nll_and_sample_mean_matches(self):
        # toy trained flow: data N(mu0, 0.3) independent of condition
        cfg = FlowConfig(channels=2, num_steps=2, lstm_hidden=8, history=1, lookahead=0,
                         audio_dim=2)
        model = NormFlowModel(cfg, seed=15)
        rng = Rng(106)
        mu0 = np.array([1.5, -0.75])
        params = model.parameters()
        opt = AdamState(learning_rate=5e-3)
        cond = Tensor(np.zeros((64, cfg.cond_dim)))
        first = None
        for step in range(400):
            data = Tensor(rng.normal(64, 2, std=0.3) + mu0)
            nll, _ = model.nll_loss(data, cond, model.init_state(64))
            zero_grads(params)
            backward(nll)
            adam_step(params, opt)
            if first is None:
                first = nll.item()
        assert nll.item() < first
        draws = Rng(107).normal(10000, 2)
        with no_grad():
            samples, _, _ = model.flow_sample(Tensor(draws),
                                              Tensor(np.zeros((10000, cfg.cond_dim))),
                                              model.init_state(10000))
        mean = samples.data.mean(axis=0)
        se = samples.data.std(axis=0) / np.sqrt(10000)
        assert np.all(np.abs(mean - mu0) < 3.0 * se + 0.05)


class TestGenerateSequence:
    @pytest.fixture(scope="class")
    def models(self):
        expr = NormFlowModel(expression_flow_config(lstm_hidden=8), seed=16, which="expression")
        pose = NormFlowModel(pose_flow_config(lstm_hidden=8), seed=17, which="pose")
        randomize(expr, 18, scale=0.05)
        randomize(pose, 19, scale=0.05)
        return expr, pose

    @pytest.fixture(scope="class")
    def clip(self):
        return generate_clip(5, 30, 6, size=32)

    def test_single_frame(self, models, clip):
        expr, pose = models
        frames = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 1,
                                   temperature=0.0)
        assert len(frames) == 1

    def test_temperature_zero_deterministic(self, models, clip):
        expr, pose = models
        a = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 8,
                              temperature=0.0, rng=Rng(1))
        b = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 8,
                              temperature=0.0, rng=Rng(2))
        for fa, fb in zip(a, b):
            assert fa.to_vector().tobytes() == fb.to_vector().tobytes()

    def test_fixed_seed_bit_identical(self, models, clip):
        expr, pose = models
        a = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 8,
                              temperature=0.8, rng=Rng(42))
        b = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 8,
                              temperature=0.8, rng=Rng(42))
        for fa, fb in zip(a, b):
            assert fa.to_vector().tobytes() == fb.to_vector().tobytes()

    def test_crop_carried_from_source(self, models, clip):
        expr, pose = models
        frames = generate_sequence(expr, pose, clip.audio_features, clip.motions[0], 4,
                                   temperature=0.5, rng=Rng(9))
        for f in frames:
            assert np.array_equal(f.crop, clip.motions[0].crop)

    def test_insufficient_audio_rejected(self, models, clip):
        expr, pose = models
        with pytest.raises(ValueError, match="audio too short"):
            generate_sequence(expr, pose, clip.audio_features[:10], clip.motions[0], 10)


def test_build_condition_layout():
    cfg = FlowConfig(channels=3, num_steps=1, lstm_hidden=4, history=2, lookahead=1,
                     audio_dim=2, condition_initial=True)
    audio = np.arange(10.0).reshape(5, 2)
    hist = [np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])]
    cond = build_condition(cfg, hist, audio, 2, initial=np.array([7.0, 8.0, 9.0]))
    assert cond.shape == (cfg.cond_dim,)
    assert np.array_equal(cond[:6], [1, 2, 3, 4, 5, 6])
    assert np.array_equal(cond[6:14], audio[0:4].reshape(-1))  # rows 0..3
    assert np.array_equal(cond[14:], [7, 8, 9])


def test_flow_checkpoint_roundtrip(tmp_path):
    model = NormFlowModel(TINY, seed=20, which="expression")
    randomize(model, 21)
    model.save(str(tmp_path / "flow"))
    again = NormFlowModel.load(str(tmp_path / "flow"))
    for a, b in zip(model.parameters(), again.parameters()):
        assert np.array_equal(a.data, b.data)
    assert again.which == "expression"
