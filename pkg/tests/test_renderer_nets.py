"""Mapping network, AdaIN, warping, editing, and full-render invariants."""

import numpy as np
import pytest

from facerender.data import ou_track, render_sprite
from facerender.face import window_descriptor, descriptors_to_tensor
from facerender.losses import FeatureExtractor, LossWeights, total_loss
from facerender.nets import (
    RendererConfig,
    RendererModel,
    adain,
    interpolate_latent,
    warp_with_flow,
)
from facerender.rng import Rng
from facerender.tensor import (
    Tensor,
    backward,
    grad_check,
    identity_grid,
    instance_stats,
    tsum,
    zero_grads,
)

CFG = RendererConfig(image_size=32, base_channels=8, z_dim=48, mapping_hidden=32, window_len=9)


@pytest.fixture(scope="module")
def model():
    return RendererModel(CFG, seed=42)


@pytest.fixture(scope="module")
def batch():
    track = ou_track(40, 55)
    src = np.stack([render_sprite(3 + i, track[i], CFG.image_size) for i in range(2)])
    tgt = np.stack([render_sprite(3 + i, track[i + 8], CFG.image_size) for i in range(2)])
    descs = descriptors_to_tensor([window_descriptor(track, i + 8, CFG.window_len)
                                   for i in range(2)])
    return Tensor(src), Tensor(tgt), descs


class TestMappingNetwork:
    def test_deterministic(self, model, batch):
        src, _, descs = batch
        z1 = model.map_motion(descs)
        z2 = model.map_motion(descs)
        assert np.array_equal(z1.data, z2.data)

    def test_output_shape(self, model, batch):
        _, _, descs = batch
        assert model.map_motion(descs).shape == (2, CFG.z_dim)

    def test_default_config_shape_is_256(self):
        m = RendererModel(RendererConfig(), seed=0)
        track = ou_track(30, 5)
        descs = descriptors_to_tensor([window_descriptor(track, 14, 27)])
        assert m.map_motion(descs).shape == (1, 256)

    def test_zero_weights_give_zero_latent(self, batch):
        _, _, descs = batch
        m = RendererModel(CFG, seed=1)
        for name, p in m.store.params.items():
            if name.startswith("mapping."):
                p.data[...] = 0.0
        assert np.all(m.map_motion(descs).data == 0.0)

    def test_wrong_channel_count_rejected(self, model):
        with pytest.raises(ValueError, match="descriptor"):
            model.map_motion(Tensor(np.zeros((1, 70, 9))))


class TestAdain:
    def test_unit_scale_zero_shift_is_instance_norm(self):
        rng = Rng(60)
        c = 4
        x = Tensor(rng.normal(2, c, 16, 16))
        z = Tensor(rng.normal(2, 8))
        head_w = Tensor(np.zeros((8, 2 * c)))
        head_b = Tensor(np.concatenate([np.ones(c), np.zeros(c)]))
        out = adain(x, z, head_w, head_b)
        mean, std = instance_stats(out)
        assert np.abs(mean.data).max() < 1e-3
        assert np.abs(std.data - 1.0).max() < 1e-2

    def test_zero_scale_gives_constant_bias(self):
        rng = Rng(61)
        c = 3
        x = Tensor(rng.normal(1, c, 8, 8))
        z = Tensor(rng.normal(1, 5))
        head_w = Tensor(np.zeros((5, 2 * c)))
        bias = np.concatenate([np.zeros(c), np.array([0.3, -0.7, 1.1])])
        out = adain(x, z, head_w, Tensor(bias))
        for ch, expected in enumerate([0.3, -0.7, 1.1]):
            assert np.abs(out.data[:, ch] - expected).max() < 1e-12

    def test_matches_direct_formula(self):
        rng = Rng(62)
        c = 5
        x = rng.normal(2, c, 6, 6)
        z = rng.normal(2, 7)
        head_w = rng.normal(7, 2 * c) * 0.3
        head_b = rng.normal(2 * c)
        out = adain(Tensor(x), Tensor(z), Tensor(head_w), Tensor(head_b))
        y = z @ head_w + head_b
        ys, yb = y[:, :c], y[:, c:]
        mu = x.mean(axis=(2, 3), keepdims=True)
        sd = np.sqrt(((x - mu) ** 2).mean(axis=(2, 3), keepdims=True) + 1e-5)
        oracle = ys[:, :, None, None] * (x - mu) / sd + yb[:, :, None, None]
        assert np.abs(out.data - oracle).max() < 1e-10

    def test_post_statistics_at_64(self):
        rng = Rng(63)
        c = 6
        x = Tensor(rng.normal(2, c, 64, 64))
        z = Tensor(rng.normal(2, 8))
        head_w = Tensor(rng.normal(8, 2 * c) * 0.2)
        head_b = Tensor(rng.normal(2 * c))
        out = adain(x, z, head_w, Tensor(head_b.data))
        y = z.data @ head_w.data + head_b.data
        ys, yb = y[:, :c], y[:, c:]
        mean, std = instance_stats(out)
        assert np.abs(mean.data - yb).max() < 1e-3
        assert np.abs(std.data - np.abs(ys)).max() < 1e-2


class TestWarping:
    def test_fresh_model_zero_flow(self, model, batch):
        src, _, descs = batch
        z = model.map_motion(descs)
        flow = model.predict_flow(src, z)
        assert np.all(flow.data == 0.0)

    def test_flow_shape_quarter_resolution(self, batch):
        m = RendererModel(RendererConfig(), seed=3)
        track = ou_track(30, 5)
        src = Tensor(np.stack([render_sprite(1, track[0], 64)]))
        descs = descriptors_to_tensor([window_descriptor(track, 14, 27)])
        flow = m.predict_flow(src, m.map_motion(descs))
        assert flow.shape == (1, 2, 16, 16)

    def test_flow_determinism(self, model, batch):
        src, _, descs = batch
        z = model.map_motion(descs)
        f1 = model.predict_flow(src, z)
        f2 = model.predict_flow(src, z)
        assert np.array_equal(f1.data, f2.data)

    def test_zero_flow_warp_is_identity(self, batch):
        src, _, _ = batch
        flow = Tensor(np.zeros((2, 2, CFG.flow_size, CFG.flow_size)))
        out = warp_with_flow(src, flow)
        assert np.abs(out.data - src.data).max() < 1e-12

    def test_uniform_offset_shifts_by_scale(self):
        # column-coded image: warp with offset +1 (quarter res) samples x+4
        w = 32
        img = np.broadcast_to(np.arange(w, dtype=np.float64), (1, 3, w, w)).copy()
        flow = np.zeros((1, 2, w // 4, w // 4))
        flow[:, 0] = 1.0
        out = warp_with_flow(Tensor(img), Tensor(flow))
        expected = np.minimum(np.arange(w) + 4, w - 1).astype(np.float64)
        assert np.abs(out.data[0, 0] - expected).max() < 1e-9

    def test_warp_gradient_wrt_flow(self):
        rng = Rng(64)
        src = Tensor(rng.normal(1, 2, 8, 8), name="src")
        flow = Tensor(rng.normal(1, 2, 2, 2) * 0.3, requires_grad=True, name="flow")
        rep = grad_check(lambda: tsum(warp_with_flow(src, flow) ** 2.0), [flow], tol=1e-4)
        assert rep.passed, rep


class TestEditing:
    def test_output_shape_and_range(self, model, batch):
        src, _, descs = batch
        warped, edited, _, _ = model.render_full(src, descs)
        assert edited.shape == src.shape
        assert np.abs(edited.data).max() <= 1.0

    def test_deterministic(self, model, batch):
        src, _, descs = batch
        _, e1, _, _ = model.render_full(src, descs)
        _, e2, _, _ = model.render_full(src, descs)
        assert np.array_equal(e1.data, e2.data)

    def test_resolution_mismatch_rejected(self, model, batch):
        src, _, descs = batch
        z = model.map_motion(descs)
        with pytest.raises(ValueError, match="warped"):
            model.edit_image(Tensor(np.zeros((2, 3, 16, 16))), src, z)


class TestRenderFull:
    def test_fresh_model_warp_is_source(self, batch):
        src, _, descs = batch
        m = RendererModel(CFG, seed=11)
        warped, edited, flow, z = m.render_full(src, descs)
        assert np.abs(warped.data - src.data).max() < 1e-12
        for t in (warped, edited, flow, z):
            assert np.all(np.isfinite(t.data))

    def test_byte_stable_through_checkpoint_roundtrip(self, model, batch, tmp_path):
        src, _, descs = batch
        _, e1, _, _ = model.render_full(src, descs)
        model.save(str(tmp_path / "ck"))
        again = RendererModel.load(str(tmp_path / "ck"))
        _, e2, _, _ = again.render_full(src, descs)
        assert e1.data.tobytes() == e2.data.tobytes()

    def test_batch_order_invariance(self, model, batch):
        src, _, descs = batch
        _, edited, _, _ = model.render_full(src, descs)
        perm_src = Tensor(src.data[::-1].copy())
        perm_descs = Tensor(descs.data[::-1].copy())
        _, edited_perm, _, _ = model.render_full(perm_src, perm_descs)
        assert np.array_equal(edited_perm.data, edited.data[::-1])

    def test_no_dead_parameters(self, batch):
        src, tgt, descs = batch
        m = RendererModel(CFG, seed=77)
        # perturb the zero-initialized flow head so the warp actually moves
        rng = Rng(5)
        m.store.params["warping.head.w"].data += rng.normal(
            *m.store.params["warping.head.w"].shape, std=0.02)
        fx = FeatureExtractor(211)
        warped, edited, _, _ = m.render_full(src, descs)
        loss, _ = total_loss(warped, edited, tgt, LossWeights(), fx, levels=3)
        zero_grads(m.parameters())
        backward(loss)
        dead = [p.name for p in m.parameters()
                if p.grad is None or np.abs(p.grad).max() == 0.0]
        assert dead == [], f"dead parameters: {dead}"

    def test_flow_head_gets_gradient_at_zero_init(self, batch):
        src, tgt, descs = batch
        m = RendererModel(CFG, seed=78)
        fx = FeatureExtractor(212)
        warped, edited, _, _ = m.render_full(src, descs)
        loss, _ = total_loss(warped, edited, tgt, LossWeights(), fx, levels=3)
        zero_grads(m.parameters())
        backward(loss)
        head = m.store.params["warping.head.w"]
        assert head.grad is not None and np.abs(head.grad).max() > 0.0


class TestInterpolateLatent:
    def test_endpoints(self):
        rng = Rng(65)
        z1, z2 = Tensor(rng.normal(1, 8)), Tensor(rng.normal(1, 8))
        assert interpolate_latent(z1, z2, 1.0) is z1
        assert interpolate_latent(z1, z2, 0.0) is z2

    def test_scalar_midpoint(self):
        z = interpolate_latent(Tensor([[2.0]]), Tensor([[4.0]]), 0.5)
        assert np.allclose(z.data, [[3.0]])

    def test_alpha_out_of_range(self):
        z = Tensor(np.zeros((1, 4)))
        with pytest.raises(ValueError):
            interpolate_latent(z, z, 1.5)

    def test_endpoint_render_bit_identical(self, model, batch):
        src, _, descs = batch
        z1 = model.map_motion(descs)
        z2 = Tensor(z1.data + 0.5)
        z_end = interpolate_latent(z1, z2, 1.0)

        def render(z):
            flow = model.predict_flow(src, z)
            warped = model.warp_image(src, flow)
            return model.edit_image(warped, src, z)

        assert render(z_end).data.tobytes() == render(z1).data.tobytes()


def test_image_size_must_be_multiple_of_16():
    with pytest.raises(ValueError, match="16"):
        RendererConfig(image_size=40)


def test_full_renderer_loss_gradcheck_toy():
    """End-to-end differentiability at toy size (subsampled coordinates)."""
    cfg = RendererConfig(image_size=32, base_channels=4, z_dim=12, mapping_hidden=8,
                         window_len=5)
    m = RendererModel(cfg, seed=9)
    rng = Rng(91)
    # nudge every parameter off its (possibly zero) init so no kink sits
    # exactly at the evaluation point
    for p in m.parameters():
        p.data += rng.normal(*p.shape, std=0.01)
    track = ou_track(12, 21)
    src = Tensor(np.clip(rng.normal(1, 3, 32, 32, std=0.4), -1, 1))
    tgt = Tensor(np.clip(rng.normal(1, 3, 32, 32, std=0.4), -1, 1))
    descs = descriptors_to_tensor([window_descriptor(track, 6, 5)])
    fx = FeatureExtractor(300)

    def f():
        warped, edited, _, _ = m.render_full(src, descs)
        loss, _ = total_loss(warped, edited, tgt, LossWeights(), fx, levels=2)
        return loss

    rep = grad_check(f, m.parameters(), tol=1e-4, max_entries_per_param=2, rng=Rng(17))
    assert rep.passed, rep
