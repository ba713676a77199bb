"""Morphable-model coefficients, motion frames, and descriptor windows.

A motion frame is the semantic control vector for one video frame:
64 expression coefficients, Euler rotation (pitch, yaw, roll), relative
translation, and three crop parameters (scale, offset_x, offset_y) that
recover absolute face placement. A descriptor stacks a window of frames
around a center frame; the default window length is 27.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np

from .tensor import Tensor, load_checkpoint, save_checkpoint

BETA_DIM = 64
IDENTITY_DIM = 80
POSE_DIM = 6  # euler(3) + translation(3)
FRAME_DIM = BETA_DIM + 3 + 3 + 3  # 73
DEFAULT_WINDOW = 27


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    wrapped = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return wrapped if wrapped.shape else float(wrapped)


@dataclass(frozen=True)
class MotionFrame:
    beta: np.ndarray            # expression coefficients, length 64
    rotation: np.ndarray        # euler radians (pitch, yaw, roll), each in (-pi, pi]
    translation: np.ndarray     # relative translation, model units
    crop: np.ndarray            # (scale, offset_x, offset_y) in normalized image units

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        rot = wrap_angle(np.asarray(self.rotation, dtype=np.float64).reshape(-1))
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        crop = np.asarray(self.crop, dtype=np.float64).reshape(-1)
        if beta.shape != (BETA_DIM,):
            raise ValueError(f"beta must have length {BETA_DIM}, got {beta.shape}")
        if rot.shape != (3,) or trans.shape != (3,) or crop.shape != (3,):
            raise ValueError("rotation, translation and crop must each have length 3")
        if not np.all(np.isfinite(beta)) or not np.all(np.isfinite(rot)) \
                or not np.all(np.isfinite(trans)) or not np.all(np.isfinite(crop)):
            raise ValueError("motion frame contains non-finite values")
        if crop[0] <= 0.0:
            raise ValueError(f"crop scale must be positive, got {crop[0]}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "crop", crop)

    @classmethod
    def zero(cls) -> "MotionFrame":
        return cls(np.zeros(BETA_DIM), np.zeros(3), np.zeros(3), np.array([1.0, 0.0, 0.0]))

    def to_vector(self) -> np.ndarray:
        """Flat layout [beta(64) | euler(3) | translation(3) | crop(3)]."""
        return np.concatenate([self.beta, self.rotation, self.translation, self.crop])

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "MotionFrame":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape != (FRAME_DIM,):
            raise ValueError(f"motion vector must have length {FRAME_DIM}, got {vec.shape}")
        return cls(vec[:BETA_DIM], vec[BETA_DIM:BETA_DIM + 3], vec[BETA_DIM + 3:BETA_DIM + 6],
                   vec[BETA_DIM + 6:])

    def pose_vector(self) -> np.ndarray:
        """euler(3) + translation(3), the pose-flow channels."""
        return np.concatenate([self.rotation, self.translation])

    def to_json_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "crop": self.crop.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MotionFrame":
        return cls(d["beta"], d["rotation"], d["translation"], d["crop"])


@dataclass(frozen=True)
class MotionDescriptor:
    frames: List[MotionFrame]
    window_len: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.window_len < 1 or self.window_len % 2 == 0:
            raise ValueError(f"window_len must be positive odd, got {self.window_len}")
        if len(self.frames) != self.window_len:
            raise ValueError(f"descriptor has {len(self.frames)} frames, expected {self.window_len}")

    @property
    def center_index(self) -> int:
        return (self.window_len - 1) // 2

    @property
    def center(self) -> MotionFrame:
        return self.frames[self.center_index]


@dataclass(frozen=True)
class FaceBasis:
    mean_shape: np.ndarray       # length 3V
    identity_basis: np.ndarray   # 3V x 80
    expression_basis: np.ndarray  # 3V x 64

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        bid = np.asarray(self.identity_basis, dtype=np.float64)
        bexp = np.asarray(self.expression_basis, dtype=np.float64)
        if bid.ndim != 2 or bid.shape != (mean.size, IDENTITY_DIM):
            raise ValueError(f"identity basis must be {mean.size}x{IDENTITY_DIM}, got {bid.shape}")
        if bexp.ndim != 2 or bexp.shape != (mean.size, BETA_DIM):
            raise ValueError(f"expression basis must be {mean.size}x{BETA_DIM}, got {bexp.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(bid)) and np.all(np.isfinite(bexp))):
            raise ValueError("face basis contains non-finite entries")
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "identity_basis", bid)
        object.__setattr__(self, "expression_basis", bexp)

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.size // 3

    def save(self, dirpath: str) -> None:
        save_checkpoint(dirpath, "face_basis", {
            "mean_shape": self.mean_shape,
            "identity_basis": self.identity_basis,
            "expression_basis": self.expression_basis,
        })

    @classmethod
    def load(cls, dirpath: str) -> "FaceBasis":
        arrays, _ = load_checkpoint(dirpath, expect_kind="face_basis")
        return cls(arrays["mean_shape"], arrays["identity_basis"], arrays["expression_basis"])


def shape_from_coeffs(basis: FaceBasis, alpha: Sequence[float], beta: Sequence[float]) -> np.ndarray:
    """S = mean + B_id @ alpha + B_exp @ beta."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if alpha.shape != (IDENTITY_DIM,):
        raise ValueError(f"alpha must have length {IDENTITY_DIM}, got {alpha.shape}")
    if beta.shape != (BETA_DIM,):
        raise ValueError(f"beta must have length {BETA_DIM}, got {beta.shape}")
    return basis.mean_shape + basis.identity_basis @ alpha + basis.expression_basis @ beta


def euler_to_rotation(angles: Sequence[float]) -> np.ndarray:
    """(pitch, yaw, roll) -> R = Rz(roll) @ Ry(yaw) @ Rx(pitch), always in SO(3)."""
    pitch, yaw, roll = (float(a) for a in np.asarray(angles, dtype=np.float64).reshape(3))
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def window_descriptor(track: Sequence[MotionFrame], center: int, window_len: int = DEFAULT_WINDOW,
                      mode: str = "windowed") -> MotionDescriptor:
    """Build the descriptor for frame ``center`` of a motion track.

    windowed: gather center +/- radius, replicating edge frames past the
    track boundaries. single: replicate the center frame window_len times
    (also the inference path for one-off target motions).
    """
    if not track:
        raise ValueError("window_descriptor: empty track")
    if mode not in ("windowed", "single"):
        raise ValueError(f"window_descriptor: unknown mode '{mode}'")
    if not 0 <= center < len(track):
        raise IndexError(f"center {center} out of range for track of length {len(track)}")
    if mode == "single":
        return MotionDescriptor([track[center]] * window_len, window_len)
    radius = (window_len - 1) // 2
    idxs = np.clip(np.arange(center - radius, center + radius + 1), 0, len(track) - 1)
    return MotionDescriptor([track[int(i)] for i in idxs], window_len)


def descriptor_to_tensor(d: MotionDescriptor) -> Tensor:
    """Stack to [1, 73, window_len]: channels [beta | euler | t' | crop], time last."""
    mat = np.stack([f.to_vector() for f in d.frames], axis=1)
    return Tensor(mat[None, :, :])


def descriptors_to_tensor(ds: Sequence[MotionDescriptor]) -> Tensor:
    """Batch variant -> [N, 73, window_len]."""
    return Tensor(np.stack([np.stack([f.to_vector() for f in d.frames], axis=1) for d in ds]))


def tensor_to_descriptor(t: Tensor) -> MotionDescriptor:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ValueError(f"tensor_to_descriptor: expected batch of 1, got {data.shape}")
        data = data[0]
    if data.shape[0] != FRAME_DIM:
        raise ValueError(f"tensor_to_descriptor: expected {FRAME_DIM} channels, got {data.shape}")
    frames = [MotionFrame.from_vector(data[:, j]) for j in range(data.shape[1])]
    return MotionDescriptor(frames, window_len=data.shape[1])


def save_track(path: str, track: Iterable[MotionFrame]) -> None:
    """Motion track as JSON lines, one frame per line."""
    with open(path, "w") as fh:
        for frame in track:
            fh.write(json.dumps(frame.to_json_dict()) + "\n")


def load_track(path: str) -> List[MotionFrame]:
    frames = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                frames.append(MotionFrame.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{ln}: bad motion frame record: {exc}") from exc
    return frames


def random_orthonormal_basis(rng, rows: int, cols: int) -> np.ndarray:
    """Random column-orthonormal matrix (stand-in PCA basis for tests)."""
    m = rng.normal(rows, cols)
    q, _ = np.linalg.qr(m)
    return q[:, :cols]
