"""The three-network renderer: motion mapping, warping, and editing.

A descriptor window is mapped to a latent vector z; z modulates every
convolution of the warping and editing hourglasses through per-site AdaIN
heads. The warping network emits a quarter-resolution flow field whose
head is zero-initialized, so an untrained model warps with the identity.
The editing network refines the warped image behind skip connections and
a tanh output head.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .face import DEFAULT_WINDOW, FRAME_DIM
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    affine_channels,
    bilinear_sample,
    concat,
    conv1d,
    conv2d,
    identity_grid,
    instance_norm,
    leaky_relu,
    linear,
    mul,
    narrow,
    reshape,
    tanh,
    upsample_bilinear,
    upsample_nearest2x,
)
from .tensor.serialize import (
    CheckpointError,
    assign_arrays,
    load_checkpoint,
    save_checkpoint,
)

FLOW_SCALE = 4  # flow is predicted at 1/4 of the image resolution


@dataclass
class RendererConfig:
    image_size: int = 64
    base_channels: int = 16
    z_dim: int = 256
    mapping_layers: int = 4
    mapping_hidden: int = 128
    negative_slope: float = 0.2
    window_len: int = DEFAULT_WINDOW
    feature_seed: int = 2024  # seed of the frozen loss/metric feature extractor

    def __post_init__(self):
        if self.image_size % 16 != 0:
            # The hourglass bottoms out at H/16 and the decoder doubles twice
            # to reach the H/4 flow grid, so 16 | image_size is required.
            raise ValueError(f"image_size must be a multiple of 16, got {self.image_size}")
        if self.window_len % 2 == 0 or self.window_len < 1:
            raise ValueError(f"window_len must be positive odd, got {self.window_len}")

    @property
    def flow_size(self) -> int:
        return self.image_size // FLOW_SCALE

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RendererConfig":
        return cls(**d)


class ParamStore:
    """Named trainable tensors; insertion order is the checkpoint order."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def tensors(self) -> List[Tensor]:
        return list(self.params.values())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def subset(self, prefix: str) -> List[Tensor]:
        return [t for k, t in self.params.items() if k.startswith(prefix)]


def he_normal(rng: Rng, shape: Tuple[int, ...], fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    return rng.normal(*shape, std=gain / np.sqrt(fan_in))


class AdainConv2d:
    """conv3x3 -> AdaIN (own affine head from z) -> leaky ReLU."""

    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int, stride: int,
                 z_dim: int, rng: Rng, slope: float):
        self.stride = stride
        self.slope = slope
        self.cout = cout
        self.w = store.add(f"{prefix}.conv.w", he_normal(rng, (cout, cin, 3, 3), cin * 9, slope))
        self.b = store.add(f"{prefix}.conv.b", np.zeros(cout))
        self.head_w = store.add(f"{prefix}.adain.w", rng.normal(z_dim, 2 * cout, std=0.05 / np.sqrt(z_dim)))
        head_b = np.concatenate([np.ones(cout), np.zeros(cout)])  # y_s near 1, y_b near 0
        self.head_b = store.add(f"{prefix}.adain.b", head_b)

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        y = conv2d(x, self.w, self.b, stride=self.stride, padding=1)
        y = adain(y, z, self.head_w, self.head_b)
        return leaky_relu(y, self.slope)


def adain(x: Tensor, z: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Normalize per (sample, channel), then scale/shift with (y_s, y_b) = affine(z)."""
    c = x.shape[1]
    y = linear(z, head_w, head_b)
    if y.shape[1] != 2 * c:
        raise ValueError(f"adain: head emits {y.shape[1]} values for {c} channels")
    y_s = narrow(y, 1, 0, c)
    y_b = narrow(y, 1, c, c)
    return affine_channels(instance_norm(x), y_s, y_b)


class MappingNetwork:
    """1D-conv stack over the descriptor window; collapses time, emits z."""

    def __init__(self, store: ParamStore, cfg: RendererConfig, rng: Rng):
        self.cfg = cfg
        self.convs = []
        t = cfg.window_len
        cin = FRAME_DIM
        depth = 0
        # Stride-2 convolutions until the time axis collapses; mapping_layers
        # sets the minimum depth (extra layers run at T=1).
        while t > 1 or depth < cfg.mapping_layers:
            w = store.add(f"mapping.conv{depth}.w",
                          he_normal(rng, (cfg.mapping_hidden, cin, 3), cin * 3, cfg.negative_slope))
            b = store.add(f"mapping.conv{depth}.b", np.zeros(cfg.mapping_hidden))
            self.convs.append((w, b))
            t = (t + 2 - 3) // 2 + 1
            cin = cfg.mapping_hidden
            depth += 1
            if depth > 32:
                raise RuntimeError("mapping network failed to collapse the time axis")
        self.out_w = store.add("mapping.out.w",
                               rng.normal(cfg.mapping_hidden, cfg.z_dim, std=1.0 / np.sqrt(cfg.mapping_hidden)))
        self.out_b = store.add("mapping.out.b", np.zeros(cfg.z_dim))

    def __call__(self, descriptor: Tensor) -> Tensor:
        if descriptor.ndim != 3 or descriptor.shape[1] != FRAME_DIM:
            raise ValueError(
                f"map_motion: descriptor must be [N,{FRAME_DIM},window], got {descriptor.shape}")
        h = descriptor
        for w, b in self.convs:
            h = leaky_relu(conv1d(h, w, b, stride=2, padding=1), self.cfg.negative_slope)
        n = h.shape[0]
        h = reshape(h, (n, h.shape[1] * h.shape[2]))
        return linear(h, self.out_w, self.out_b)


class WarpingNetwork:
    """Hourglass from the source image to a quarter-resolution flow field."""

    def __init__(self, store: ParamStore, cfg: RendererConfig, rng: Rng):
        c0 = cfg.base_channels
        chans = [c0, 2 * c0, 4 * c0, 8 * c0]
        args = dict(z_dim=cfg.z_dim, rng=rng, slope=cfg.negative_slope)
        self.stem = AdainConv2d(store, "warping.stem", 3, c0, 1, **args)
        self.down = [
            AdainConv2d(store, "warping.down0", chans[0], chans[1], 2, **args),   # H/2
            AdainConv2d(store, "warping.down1", chans[1], chans[2], 2, **args),   # H/4
            AdainConv2d(store, "warping.down2", chans[2], chans[3], 2, **args),   # H/8
            AdainConv2d(store, "warping.down3", chans[3], chans[3], 2, **args),   # H/16
        ]
        self.up = [
            AdainConv2d(store, "warping.up0", chans[3], chans[2], 1, **args),     # H/8
            AdainConv2d(store, "warping.up1", chans[2], chans[1], 1, **args),     # H/4
        ]
        # Zero-initialized head: the initial flow is exactly the zero field.
        self.head_w = store.add("warping.head.w", np.zeros((2, chans[1], 3, 3)))
        self.head_b = store.add("warping.head.b", np.zeros(2))

    def __call__(self, source: Tensor, z: Tensor) -> Tensor:
        h = self.stem(source, z)
        for blk in self.down:
            h = blk(h, z)
        for blk in self.up:
            h = blk(upsample_nearest2x(h), z)
        return conv2d(h, self.head_w, self.head_b, stride=1, padding=1)


class EditingNetwork:
    """Skip-connected hourglass refining the warped image; tanh-bounded output.

    The hourglass body runs from H/2 down to H/8 and back; a full-resolution
    stage then concatenates the raw (warped, source) pair back in before the
    head, so source textures reach the output unblurred.
    """

    def __init__(self, store: ParamStore, cfg: RendererConfig, rng: Rng):
        c0 = cfg.base_channels
        chans = [c0, 2 * c0, 4 * c0]
        args = dict(z_dim=cfg.z_dim, rng=rng, slope=cfg.negative_slope)
        self.stem = AdainConv2d(store, "editing.stem", 6, chans[0], 2, **args)     # H/2
        self.down0 = AdainConv2d(store, "editing.down0", chans[0], chans[1], 2, **args)  # H/4
        self.down1 = AdainConv2d(store, "editing.down1", chans[1], chans[2], 2, **args)  # H/8
        self.mid = AdainConv2d(store, "editing.mid", chans[2], chans[2], 1, **args)
        self.up0 = AdainConv2d(store, "editing.up0", chans[2] + chans[1], chans[1], 1, **args)
        self.up1 = AdainConv2d(store, "editing.up1", chans[1] + chans[0], chans[0], 1, **args)
        self.full = AdainConv2d(store, "editing.full", chans[0] + 6, chans[0] // 2, 1, **args)
        self.head_w = store.add("editing.head.w",
                                he_normal(rng, (3, chans[0] // 2, 3, 3), (chans[0] // 2) * 9))
        self.head_b = store.add("editing.head.b", np.zeros(3))

    def __call__(self, warped: Tensor, source: Tensor, z: Tensor) -> Tensor:
        x = concat([warped, source], axis=1)
        s0 = self.stem(x, z)
        s1 = self.down0(s0, z)
        h = self.down1(s1, z)
        h = self.mid(h, z)
        h = self.up0(concat([upsample_nearest2x(h), s1], axis=1), z)
        h = self.up1(concat([upsample_nearest2x(h), s0], axis=1), z)
        h = self.full(concat([upsample_nearest2x(h), x], axis=1), z)
        return tanh(conv2d(h, self.head_w, self.head_b, stride=1, padding=1))


class RendererModel:
    """Mapping + warping + editing networks over one parameter store."""

    def __init__(self, cfg: RendererConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = Rng(seed).derive("renderer-init")
        self.mapping = MappingNetwork(self.store, cfg, rng.derive("mapping"))
        self.warping = WarpingNetwork(self.store, cfg, rng.derive("warping"))
        self.editing = EditingNetwork(self.store, cfg, rng.derive("editing"))

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return self.store.tensors()

    def mapping_params(self) -> List[Tensor]:
        return self.store.subset("mapping.")

    def warping_params(self) -> List[Tensor]:
        return self.store.subset("warping.")

    def editing_params(self) -> List[Tensor]:
        return self.store.subset("editing.")

    # -- forward pieces --------------------------------------------------------

    def map_motion(self, descriptor: Tensor) -> Tensor:
        return self.mapping(descriptor)

    def predict_flow(self, source: Tensor, z: Tensor) -> Tensor:
        if source.ndim != 4 or source.shape[1] != 3:
            raise ValueError(f"predict_flow: source must be [N,3,H,W], got {source.shape}")
        return self.warping(source, z)

    def warp_image(self, source: Tensor, flow: Tensor) -> Tensor:
        return warp_with_flow(source, flow)

    def edit_image(self, warped: Tensor, source: Tensor, z: Tensor) -> Tensor:
        if warped.shape != source.shape:
            raise ValueError(f"edit_image: warped {warped.shape} != source {source.shape}")
        return self.editing(warped, source, z)

    def render_full(self, source: Tensor, descriptor: Tensor):
        """Returns (warped, edited, flow, z)."""
        z = self.map_motion(descriptor)
        flow = self.predict_flow(source, z)
        warped = self.warp_image(source, flow)
        edited = self.edit_image(warped, source, z)
        return warped, edited, flow, z

    # -- persistence -------------------------------------------------------------

    CHECKPOINT_KIND = "renderer"

    def save(self, dirpath: str, extra: Optional[dict] = None) -> None:
        meta = {"model_config": self.cfg.to_json()}
        if extra:
            meta.update(extra)
        save_checkpoint(dirpath, self.CHECKPOINT_KIND, self.store.arrays(), meta)
        with open(os.path.join(dirpath, "model_config.json"), "w") as fh:
            json.dump(self.cfg.to_json(), fh, indent=1, sort_keys=True)

    def load_arrays(self, arrays: Dict[str, np.ndarray], allow_partial: bool = False):
        return assign_arrays(self.store.arrays(), arrays, allow_missing=allow_partial)

    @classmethod
    def load(cls, dirpath: str) -> "RendererModel":
        arrays, manifest = load_checkpoint(dirpath, expect_kind=cls.CHECKPOINT_KIND)
        cfg = RendererConfig.from_json(manifest["extra"]["model_config"])
        model = cls(cfg, seed=0)
        loaded, _ = model.load_arrays(arrays)
        if len(loaded) != len(model.store.params):
            raise CheckpointError(f"renderer checkpoint {dirpath} is incomplete")
        return model


def upsample_flow(flow: Tensor, image_size: int) -> Tensor:
    """Quarter-resolution offsets -> full resolution, converted to pixel units."""
    up = upsample_bilinear(flow, image_size, image_size)
    return mul(up, float(FLOW_SCALE))


def warp_with_flow(source: Tensor, flow: Tensor) -> Tensor:
    """Bilinear warp of the source by a quarter-resolution offset field."""
    n, _, h, w = source.shape
    if flow.shape[0] != n or flow.shape[1] != 2:
        raise ValueError(f"warp_with_flow: flow shape {flow.shape} incompatible with source {source.shape}")
    offsets = upsample_flow(flow, h)
    coords = add(Tensor(identity_grid(n, h, w)), offsets)
    return bilinear_sample(source, coords)


def interpolate_latent(z1: Tensor, z2: Tensor, alpha: float) -> Tensor:
    """Convex combination alpha * z1 + (1 - alpha) * z2."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0,1], got {alpha}")
    if z1.shape != z2.shape:
        raise ValueError(f"latent shapes differ: {z1.shape} vs {z2.shape}")
    if alpha == 1.0:
        return z1
    if alpha == 0.0:
        return z2
    return add(mul(z1, float(alpha)), mul(z2, 1.0 - float(alpha)))
