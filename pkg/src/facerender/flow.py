"""Conditional recurrent normalizing flows for audio-driven motion.

Two flows map Gaussian latents to motion channels given conditioning built
from recent motion history and an audio window: a 64-channel expression
flow (10 steps) and a 6-channel pose flow (8 steps, additionally
conditioned on the initial pose). Each invertible step is actnorm ->
invertible linear -> affine coupling; the coupling parameters come from a
per-step LSTM whose hidden state advances once per time step, in either
direction, keeping forward and inverse passes exactly consistent.

All parameters initialize the flow to the identity (unit actnorm, identity
linear map, zero-initialized coupling projections), so the initial NLL is
exactly the standard-normal NLL of the data.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .face import BETA_DIM, POSE_DIM, MotionFrame, wrap_angle
from .nets import ParamStore
from .rng import Rng
from .tensor import (
    Tensor,
    absolute,
    add,
    broadcast_scalar,
    concat,
    div,
    exp,
    feature_affine,
    linear,
    log,
    logabsdet,
    lstm_cell,
    mul,
    narrow,
    neg,
    no_grad,
    rows_matmul,
    rows_solve,
    sub,
    tmean,
    tsum,
)
from .tensor.serialize import CheckpointError, assign_arrays, load_checkpoint, save_checkpoint

LOG_TWO_PI = float(np.log(2.0 * np.pi))
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class FlowConfig:
    channels: int
    num_steps: int
    lstm_hidden: int = 64
    history: int = 5          # motion frames of conditioning history
    lookahead: int = 6        # audio frames past the current one
    audio_dim: int = 26
    condition_initial: bool = False  # pose flow also sees the initial pose

    @property
    def split_a(self) -> int:
        return (self.channels + 1) // 2

    @property
    def split_b(self) -> int:
        return self.channels // 2

    @property
    def audio_window(self) -> int:
        return self.history + self.lookahead + 1

    @property
    def cond_dim(self) -> int:
        dim = self.history * self.channels + self.audio_window * self.audio_dim
        if self.condition_initial:
            dim += self.channels
        return dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "FlowConfig":
        return cls(**d)


def expression_flow_config(**overrides) -> FlowConfig:
    return FlowConfig(channels=BETA_DIM, num_steps=10, **overrides)


def pose_flow_config(**overrides) -> FlowConfig:
    return FlowConfig(channels=POSE_DIM, num_steps=8, condition_initial=True, **overrides)


class FlowHiddenState:
    """Per-coupling-layer (h, c) recurrent pairs; reset per sequence."""

    def __init__(self, pairs: List[Tuple[Tensor, Tensor]]):
        self.pairs = pairs

    @classmethod
    def zeros(cls, num_steps: int, batch: int, hidden: int) -> "FlowHiddenState":
        return cls([(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))
                    for _ in range(num_steps)])

    def detach(self) -> "FlowHiddenState":
        return FlowHiddenState([(h.detach(), c.detach()) for h, c in self.pairs])

    @property
    def batch(self) -> int:
        return self.pairs[0][0].shape[0]


# -- invertible sub-steps ----------------------------------------------------


def _check_scale(s: Tensor) -> None:
    if np.abs(s.data).min() <= SCALE_FLOOR:
        raise ValueError("actnorm scale has a zero (or numerically zero) entry")


def actnorm_forward(x: Tensor, s: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """y = s * x + b; per-sample logdet = sum_i log|s_i|."""
    _check_scale(s)
    y = feature_affine(x, s, b)
    ld = broadcast_scalar(tsum(log(absolute(s))), x.shape[0])
    return y, ld


def actnorm_inverse(y: Tensor, s: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    _check_scale(s)
    inv = div(1.0, s)
    x = feature_affine(y, inv, neg(mul(b, inv)))
    ld = broadcast_scalar(neg(tsum(log(absolute(s)))), y.shape[0])
    return x, ld


def linear_forward(x: Tensor, w: Tensor) -> Tuple[Tensor, Tensor]:
    """y_t = W x_t; logdet = log|det W| (LU-based)."""
    y = rows_matmul(x, w)
    ld = broadcast_scalar(logabsdet(w), x.shape[0])
    return y, ld


def linear_inverse(y: Tensor, w: Tensor) -> Tuple[Tensor, Tensor]:
    x = rows_solve(w, y)
    ld = broadcast_scalar(neg(logabsdet(w)), y.shape[0])
    return x, ld


class FlowStep:
    """actnorm -> invertible linear -> recurrent affine coupling."""

    def __init__(self, store: ParamStore, prefix: str, cfg: FlowConfig, rng: Rng):
        self.cfg = cfg
        c = cfg.channels
        self.s = store.add(f"{prefix}.actnorm.s", np.ones(c))
        self.b = store.add(f"{prefix}.actnorm.b", np.zeros(c))
        self.w = store.add(f"{prefix}.linear.w", np.eye(c))
        in_dim = cfg.split_b + cfg.cond_dim
        hid = cfg.lstm_hidden
        self.lstm_wx = store.add(f"{prefix}.coupling.wx", rng.normal(in_dim, 4 * hid, std=1.0 / np.sqrt(in_dim)))
        self.lstm_wh = store.add(f"{prefix}.coupling.wh", rng.normal(hid, 4 * hid, std=1.0 / np.sqrt(hid)))
        self.lstm_b = store.add(f"{prefix}.coupling.b", np.zeros(4 * hid))
        # Zero projection => coupling starts as the identity.
        self.proj_w = store.add(f"{prefix}.coupling.proj.w", np.zeros((hid, 2 * cfg.split_a)))
        self.proj_b = store.add(f"{prefix}.coupling.proj.b", np.zeros(2 * cfg.split_a))

    def _coupling_params(self, x_b: Tensor, cond: Tensor, state: Tuple[Tensor, Tensor]):
        if cond.shape != (x_b.shape[0], self.cfg.cond_dim):
            raise ValueError(
                f"coupling: condition shape {cond.shape} != ({x_b.shape[0]}, {self.cfg.cond_dim})")
        inp = concat([x_b, cond], axis=1)
        h, c = lstm_cell(inp, state[0], state[1], self.lstm_wx, self.lstm_wh, self.lstm_b)
        raw = linear(h, self.proj_w, self.proj_b)
        logs = narrow(raw, 1, 0, self.cfg.split_a)
        t = narrow(raw, 1, self.cfg.split_a, self.cfg.split_a)
        return logs, t, (h, c)

    def coupling_forward(self, x: Tensor, cond: Tensor, state: Tuple[Tensor, Tensor]):
        """y = [s*x_a + t | x_b] with (log s, t) = NN(x_b, cond); advances the LSTM once."""
        ca = self.cfg.split_a
        x_a = narrow(x, 1, 0, ca)
        x_b = narrow(x, 1, ca, self.cfg.split_b)
        logs, t, new_state = self._coupling_params(x_b, cond, state)
        y_a = add(mul(x_a, exp(logs)), t)
        return concat([y_a, x_b], axis=1), tsum(logs, axis=1), new_state

    def coupling_inverse(self, y: Tensor, cond: Tensor, state: Tuple[Tensor, Tensor]):
        ca = self.cfg.split_a
        y_a = narrow(y, 1, 0, ca)
        x_b = narrow(y, 1, ca, self.cfg.split_b)
        logs, t, new_state = self._coupling_params(x_b, cond, state)
        x_a = mul(sub(y_a, t), exp(neg(logs)))
        return concat([x_a, x_b], axis=1), neg(tsum(logs, axis=1)), new_state

    def forward(self, x: Tensor, cond: Tensor, state: Tuple[Tensor, Tensor]):
        y, ld1 = actnorm_forward(x, self.s, self.b)
        y, ld2 = linear_forward(y, self.w)
        y, ld3, new_state = self.coupling_forward(y, cond, state)
        return y, add(add(ld1, ld2), ld3), new_state

    def inverse(self, y: Tensor, cond: Tensor, state: Tuple[Tensor, Tensor]):
        x, ld3, new_state = self.coupling_inverse(y, cond, state)
        x, ld2 = linear_inverse(x, self.w)
        x, ld1 = actnorm_inverse(x, self.s, self.b)
        return x, add(add(ld1, ld2), ld3), new_state


class NormFlowModel:
    """Stack of K invertible steps; sampling runs step 1..K, inversion K..1."""

    CHECKPOINT_KIND = "flow"

    def __init__(self, cfg: FlowConfig, seed: int = 0, which: str = "flow"):
        self.cfg = cfg
        self.which = which
        self.store = ParamStore()
        rng = Rng(seed).derive("flow-init", which)
        self.steps = [FlowStep(self.store, f"step{i:02d}", cfg, rng.derive(i))
                      for i in range(cfg.num_steps)]

    def parameters(self) -> List[Tensor]:
        return self.store.tensors()

    def init_state(self, batch: int) -> FlowHiddenState:
        return FlowHiddenState.zeros(self.cfg.num_steps, batch, self.cfg.lstm_hidden)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.cfg.channels:
            raise ValueError(f"flow expects [N,{self.cfg.channels}], got {x.shape}")

    def flow_sample(self, n: Tensor, cond: Tensor, state: FlowHiddenState):
        """Forward composition p = f(n, c); returns (p, logdet, state')."""
        self._check_input(n)
        h = n
        total = None
        new_pairs = []
        for step, pair in zip(self.steps, state.pairs):
            h, ld, new_pair = step.forward(h, cond, pair)
            total = ld if total is None else add(total, ld)
            new_pairs.append(new_pair)
        return h, total, FlowHiddenState(new_pairs)

    def flow_inverse(self, p: Tensor, cond: Tensor, state: FlowHiddenState):
        """n = f^{-1}(p, c); logdet accumulates the inverse-direction terms."""
        self._check_input(p)
        h = p
        total = None
        new_pairs: List[Optional[Tuple[Tensor, Tensor]]] = [None] * len(self.steps)
        for i in range(len(self.steps) - 1, -1, -1):
            h, ld, new_pairs[i] = self.steps[i].inverse(h, cond, state.pairs[i])
            total = ld if total is None else add(total, ld)
        return h, total, FlowHiddenState(new_pairs)

    def nll_loss(self, p: Tensor, cond: Tensor, state: FlowHiddenState):
        """Mean exact negative log-likelihood of a batch at one time step."""
        n, ld_inv, new_state = self.flow_inverse(p, cond, state)
        quad = mul(tsum(mul(n, n), axis=1), 0.5)
        nll = sub(add(quad, 0.5 * self.cfg.channels * LOG_TWO_PI), ld_inv)
        return tmean(nll), new_state

    # -- persistence ---------------------------------------------------------

    def save(self, dirpath: str, extra: Optional[dict] = None) -> None:
        meta = {"flow_config": self.cfg.to_json(), "which": self.which}
        if extra:
            meta.update(extra)
        save_checkpoint(dirpath, self.CHECKPOINT_KIND, self.store.arrays(), meta)
        with open(os.path.join(dirpath, "flow_config.json"), "w") as fh:
            json.dump(meta["flow_config"] | {"which": self.which}, fh, indent=1, sort_keys=True)

    def load_arrays(self, arrays, allow_partial: bool = False):
        return assign_arrays(self.store.arrays(), arrays, allow_missing=allow_partial)

    @classmethod
    def load(cls, dirpath: str) -> "NormFlowModel":
        arrays, manifest = load_checkpoint(dirpath, expect_kind=cls.CHECKPOINT_KIND)
        cfg = FlowConfig.from_json(manifest["extra"]["flow_config"])
        model = cls(cfg, which=manifest["extra"].get("which", "flow"))
        loaded, _ = model.load_arrays(arrays)
        if len(loaded) != len(model.store.params):
            raise CheckpointError(f"flow checkpoint {dirpath} is incomplete")
        return model


# -- conditioning assembly -----------------------------------------------------


def audio_window_slice(audio: np.ndarray, index: int, history: int, lookahead: int) -> np.ndarray:
    """Rows index-history .. index+lookahead, clamped to the track (flattened)."""
    idxs = np.clip(np.arange(index - history, index + lookahead + 1), 0, audio.shape[0] - 1)
    return audio[idxs].reshape(-1)


def build_condition(cfg: FlowConfig, motion_history: Sequence[np.ndarray], audio: np.ndarray,
                    index: int, initial: Optional[np.ndarray] = None) -> np.ndarray:
    """Condition vector: [flattened k-history | audio window | initial pose?]."""
    if len(motion_history) != cfg.history:
        raise ValueError(f"need {cfg.history} history frames, got {len(motion_history)}")
    parts = [np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in motion_history]),
             audio_window_slice(audio, index, cfg.history, cfg.lookahead)]
    if cfg.condition_initial:
        if initial is None:
            raise ValueError("this flow conditions on the initial pose; none given")
        parts.append(np.asarray(initial, dtype=np.float64).reshape(-1))
    cond = np.concatenate(parts)
    if cond.shape != (cfg.cond_dim,):
        raise ValueError(f"condition has dim {cond.shape[0]}, expected {cfg.cond_dim}")
    return cond


def generate_sequence(expr_model: NormFlowModel, pose_model: NormFlowModel,
                      audio_features: np.ndarray, source_motion: MotionFrame,
                      length: int, temperature: float = 1.0,
                      rng: Optional[Rng] = None) -> List[MotionFrame]:
    """Autoregressive sampling of a motion track from audio conditioning.

    History windows start as ``history`` copies of the source motion; crop
    parameters are carried over from the source frame unchanged (framing is
    not audio-dependent). ``temperature`` scales the Gaussian latents;
    0 yields the deterministic mode sequence.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    ecfg, pcfg = expr_model.cfg, pose_model.cfg
    if ecfg.history != pcfg.history or ecfg.lookahead != pcfg.lookahead:
        raise ValueError("expression and pose flows disagree on conditioning windows")
    audio = np.asarray(audio_features, dtype=np.float64)
    if audio.ndim != 2 or audio.shape[1] != ecfg.audio_dim:
        raise ValueError(f"audio features must be [T,{ecfg.audio_dim}], got {audio.shape}")
    if audio.shape[0] < length + ecfg.lookahead:
        raise ValueError(
            f"audio too short: need {length + ecfg.lookahead} feature frames, got {audio.shape[0]}")
    rng = rng or Rng(0)
    beta_hist = [source_motion.beta.copy() for _ in range(ecfg.history)]
    pose_hist = [source_motion.pose_vector() for _ in range(pcfg.history)]
    initial_pose = source_motion.pose_vector()
    state_e = expr_model.init_state(1)
    state_p = pose_model.init_state(1)
    frames: List[MotionFrame] = []
    with no_grad():
        for i in range(length):
            cond_e = Tensor(build_condition(ecfg, beta_hist, audio, i)[None, :])
            cond_p = Tensor(build_condition(pcfg, pose_hist, audio, i, initial=initial_pose)[None, :])
            n_e = np.zeros((1, ecfg.channels)) if temperature == 0 \
                else rng.normal(1, ecfg.channels) * temperature
            n_p = np.zeros((1, pcfg.channels)) if temperature == 0 \
                else rng.normal(1, pcfg.channels) * temperature
            beta_t, _, state_e = expr_model.flow_sample(Tensor(n_e), cond_e, state_e)
            pose_t, _, state_p = pose_model.flow_sample(Tensor(n_p), cond_p, state_p)
            beta = beta_t.data[0]
            pose = pose_t.data[0]
            frames.append(MotionFrame(beta, wrap_angle(pose[:3]), pose[3:], source_motion.crop))
            beta_hist = beta_hist[1:] + [beta]
            pose_hist = pose_hist[1:] + [pose]
    return frames
