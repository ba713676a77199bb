"""Synthetic sprite-face clips with exact ground-truth motion.

Each clip is a procedurally drawn oval face whose placement, in-plane
rotation, mouth, eyes, brows, and texture fields are smooth functions of a
motion frame. Motions follow per-channel Ornstein-Uhlenbeck walks, and a
synthetic voice track is synthesized so the mouth-opening coefficient and
the audio log-energy correlate by construction. Everything is a pure
function of the seeds, so clips are bit-reproducible.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .face import BETA_DIM, FRAME_DIM, MotionFrame, load_track, save_track
from .rng import Rng
from .tensor.serialize import load_array, save_array

AUDIO_RATE = 16000
FRAME_RATE = 25
SAMPLES_PER_FRAME = AUDIO_RATE // FRAME_RATE  # 640
AUDIO_DIM = 26
ENERGY_FLOOR = 1e-10


# -- identity parameters -------------------------------------------------------


@dataclass(frozen=True)
class SpriteIdentity:
    face_color: np.ndarray
    feature_color: np.ndarray
    bg_color_a: np.ndarray
    bg_color_b: np.ndarray
    bg_grad: np.ndarray          # (gu, gv)
    radius: np.ndarray           # base (rx, ry)
    eye_dx: float
    eye_dy: float
    eye_r: float
    mouth_dy: float
    mouth_w: float
    brow_dy: float
    texture_freq: np.ndarray     # [58, 2]
    texture_phase: np.ndarray    # [58]
    texture_dir: np.ndarray      # [58, 3]
    texture_amp: float


def sprite_identity(identity_seed: int) -> SpriteIdentity:
    rng = Rng(identity_seed).derive("sprite-identity")
    n_tex = BETA_DIM - 6
    return SpriteIdentity(
        face_color=0.35 + 0.4 * rng.uniform(3),
        feature_color=0.05 + 0.2 * rng.uniform(3),
        bg_color_a=0.1 + 0.8 * rng.uniform(3),
        bg_color_b=0.1 + 0.8 * rng.uniform(3),
        bg_grad=rng.uniform(2) * 2.0 - 1.0,
        radius=np.array([0.24 + 0.06 * rng.uniform(), 0.30 + 0.08 * rng.uniform()]),
        eye_dx=0.11 + 0.04 * rng.uniform(),
        eye_dy=0.09 + 0.05 * rng.uniform(),
        eye_r=0.040 + 0.020 * rng.uniform(),
        mouth_dy=0.13 + 0.05 * rng.uniform(),
        mouth_w=0.12 + 0.06 * rng.uniform(),
        brow_dy=0.040 + 0.02 * rng.uniform(),
        texture_freq=1.0 + 3.0 * rng.uniform(n_tex, 2),
        texture_phase=2.0 * np.pi * rng.uniform(n_tex),
        texture_dir=rng.normal(n_tex, 3, std=1.0 / np.sqrt(3.0)),
        texture_amp=0.045,
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sprite_geometry(identity: SpriteIdentity, motion: MotionFrame) -> Dict[str, np.ndarray]:
    """Face-frame placement values shared by the renderer and test oracles."""
    scale, off_x, off_y = motion.crop
    pitch, yaw, roll = motion.rotation
    tx, ty, tz = motion.translation
    s_eff = scale * np.exp(0.2 * np.tanh(tz))
    cx = 0.5 + off_x + 0.25 * tx
    cy = 0.5 + off_y + 0.25 * ty
    rx = identity.radius[0] * s_eff * (0.75 + 0.25 * np.cos(yaw))
    ry = identity.radius[1] * s_eff * (0.75 + 0.25 * np.cos(pitch))
    feat_dx = 0.4 * rx * np.sin(yaw)
    feat_dy = 0.4 * ry * np.sin(pitch)
    return {
        "center": np.array([cx, cy]),
        "scale": np.array([s_eff]),
        "radii": np.array([rx, ry]),
        "feature_shift": np.array([feat_dx, feat_dy]),
        "roll": np.array([roll]),
    }


def render_sprite(identity_seed: int, motion: MotionFrame, size: int = 64) -> np.ndarray:
    """Deterministic antialiased sprite image [3, size, size] in [-1, 1]."""
    if size < 32:
        raise ValueError(f"render size must be >= 32, got {size}")
    ident = sprite_identity(identity_seed)
    geo = sprite_geometry(ident, motion)
    beta = motion.beta
    cx, cy = geo["center"]
    rx, ry = geo["radii"]
    s_eff = float(geo["scale"][0])
    feat_dx, feat_dy = geo["feature_shift"]
    roll = float(geo["roll"][0])

    px = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(px, px, indexing="xy")  # u: x coordinate, v: y
    soft = 1.2 / size

    def coverage(dist):
        return np.clip(0.5 - dist / soft, 0.0, 1.0)

    # face-frame coordinates (rotated by roll around the face center)
    cr, sr = np.cos(roll), np.sin(roll)
    du, dv = u - cx, v - cy
    fu = cr * du + sr * dv
    fv = -sr * du + cr * dv

    # background gradient
    gu, gv = ident.bg_grad
    ramp = np.clip(0.5 + 0.5 * (gu * (u - 0.5) + gv * (v - 0.5)), 0.0, 1.0)
    img = ident.bg_color_a[:, None, None] * (1.0 - ramp) + ident.bg_color_b[:, None, None] * ramp

    # face ellipse with texture tint from beta[6:]
    rad = np.sqrt((fu / rx) ** 2 + (fv / ry) ** 2)
    face_cov = coverage((rad - 1.0) * min(rx, ry))
    phase = (ident.texture_freq[:, 0:1, None] * (fu / max(rx, 1e-6))[None]
             + ident.texture_freq[:, 1:2, None] * (fv / max(ry, 1e-6))[None])
    waves = np.cos(2.0 * np.pi * phase + ident.texture_phase[:, None, None])
    tint = np.einsum("k,khw,kc->chw", beta[6:] * ident.texture_amp, waves, ident.texture_dir)
    face_color = np.clip(ident.face_color[:, None, None] + tint, 0.0, 1.0)
    img = img * (1.0 - face_cov) + face_color * face_cov

    feat = ident.feature_color[:, None, None]

    def paint(cov):
        nonlocal img
        img = img * (1.0 - cov) + feat * cov

    # eyes: openness from beta[2], beta[3]
    for side, open_coef in ((-1.0, beta[2]), (1.0, beta[3])):
        ex = side * ident.eye_dx * s_eff + feat_dx
        ey = -ident.eye_dy * s_eff + feat_dy
        er_x = ident.eye_r * s_eff
        er_y = ident.eye_r * s_eff * (0.15 + 0.85 * _sigmoid(open_coef))
        d = (np.sqrt(((fu - ex) / er_x) ** 2 + ((fv - ey) / er_y) ** 2) - 1.0) * min(er_x, er_y)
        paint(coverage(d))

    # brows: height from beta[4], beta[5]
    for side, lift_coef in ((-1.0, beta[4]), (1.0, beta[5])):
        bx = side * ident.eye_dx * s_eff + feat_dx
        by = (-ident.eye_dy - ident.brow_dy - 0.04 * np.tanh(lift_coef / 2.0)) * s_eff + feat_dy
        half_w = 0.75 * ident.eye_r * s_eff * 1.6
        half_h = 0.008 * s_eff + 0.004
        d = np.maximum(np.abs(fu - bx) - half_w, np.abs(fv - by) - half_h)
        paint(coverage(d))

    # mouth: curvature from beta[0], opening from beta[1]
    mx, my = feat_dx, ident.mouth_dy * s_eff + feat_dy
    half_w = ident.mouth_w * s_eff
    half_h = (0.005 + 0.060 * _sigmoid(beta[1])) * s_eff
    bend = 0.06 * np.tanh(beta[0] / 2.0) * s_eff
    a = fu - mx
    b = fv - my - bend * (a / max(half_w, 1e-6)) ** 2
    d = np.maximum(np.abs(b) - half_h, np.abs(a) - half_w)
    paint(coverage(d))

    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


# -- motion dynamics ------------------------------------------------------------

# Per-channel OU stationary scales: [beta(64) | euler(3) | t'(3) | crop delta(3)]
_BETA_MAIN_STD = 1.0
_BETA_TEX_STD = 0.8
_ROT_STD = np.array([0.14, 0.22, 0.14])
_TRANS_STD = np.array([0.25, 0.25, 0.30])
_CROP_STD = np.array([0.06, 0.035, 0.035])
OU_THETA = 0.02
OU_STEP_CAP = 3.0  # in units of the per-step sigma


def channel_scales() -> np.ndarray:
    scales = np.empty(FRAME_DIM)
    scales[:6] = _BETA_MAIN_STD
    scales[6:BETA_DIM] = _BETA_TEX_STD
    scales[BETA_DIM:BETA_DIM + 3] = _ROT_STD
    scales[BETA_DIM + 3:BETA_DIM + 6] = _TRANS_STD
    scales[BETA_DIM + 6:] = _CROP_STD
    return scales


_CROP_BASE = np.array([1.0, 0.0, 0.0])


def _vector_to_frame(vec: np.ndarray) -> MotionFrame:
    full = vec.copy()
    full[BETA_DIM + 6:] = _CROP_BASE + vec[BETA_DIM + 6:]
    full[BETA_DIM + 6] = max(full[BETA_DIM + 6], 0.2)  # crop scale must stay positive
    return MotionFrame.from_vector(full)


def ou_track(length: int, dynamics_seed: int, theta: float = OU_THETA) -> List[MotionFrame]:
    """Smooth random-walk motion track (OU per channel, capped increments)."""
    rng = Rng(dynamics_seed).derive("ou-track")
    scales = channel_scales()
    step_sigma = scales * np.sqrt(2.0 * theta)
    x = rng.normal(FRAME_DIM) * scales  # start at the stationary distribution
    frames = [_vector_to_frame(x)]
    for _ in range(length - 1):
        noise = rng.normal(FRAME_DIM) * step_sigma
        delta = -theta * x + np.clip(noise, -OU_STEP_CAP * step_sigma, OU_STEP_CAP * step_sigma)
        x = x + delta
        frames.append(_vector_to_frame(x))
    return frames


# Estimation noise concentrates on the expression block: expression
# coefficients are the weakly observed quantities a per-frame estimator gets
# wrong, while head placement is comparatively reliable.
NOISE_PROFILE_POSE_FACTOR = 0.25


def noise_scales() -> np.ndarray:
    scales = channel_scales()
    scales[BETA_DIM:] *= NOISE_PROFILE_POSE_FACTOR
    return scales


def perturb_track(track: Sequence[MotionFrame], amplitude: float, rng: Rng) -> List[MotionFrame]:
    """Add iid coefficient noise (channel-profiled) to every frame.

    This emulates per-frame coefficient-estimation error; it is applied to
    descriptors fed to the network, never to rendering ground truth.
    """
    if amplitude == 0.0:
        return list(track)
    scales = noise_scales()
    out = []
    for frame in track:
        vec = frame.to_vector() + rng.normal(FRAME_DIM) * scales * amplitude
        vec[BETA_DIM + 6] = max(vec[BETA_DIM + 6], 0.2)
        out.append(MotionFrame.from_vector(vec))
    return out


# -- audio ------------------------------------------------------------------------


class WavError(ValueError):
    """Malformed or unsupported WAV payload."""


@dataclass(frozen=True)
class AudioTrack:
    """PCM16 mono samples at 16 kHz, aligned to 25 video frames per second."""

    samples: np.ndarray
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.dtype != np.int16 or samples.ndim != 1:
            raise WavError(f"audio track must be 1-D int16, got {samples.dtype} {samples.shape}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / AUDIO_RATE

    def covers_frames(self, n_frames: int) -> bool:
        return len(self.samples) >= int(np.ceil(n_frames / self.frame_rate * AUDIO_RATE))

    def features(self) -> np.ndarray:
        return audio_features(self.samples, self.frame_rate)

    @classmethod
    def from_wav(cls, path: str) -> "AudioTrack":
        return cls(read_wav(path))

    def to_wav(self, path: str) -> None:
        write_wav(path, self.samples)


def write_wav(path: str, samples: np.ndarray, rate: int = AUDIO_RATE) -> None:
    """PCM16 mono RIFF/WAVE writer."""
    pcm = np.asarray(samples)
    if pcm.dtype != np.int16:
        pcm = np.clip(np.round(pcm), -32768, 32767).astype(np.int16)
    payload = pcm.astype("<i2").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(payload)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def read_wav(path: str) -> np.ndarray:
    """Strict reader: RIFF/WAVE, PCM16, mono, 16 kHz only."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF":
        raise WavError("not a RIFF file (bad magic at byte 0)")
    if blob[8:12] != b"WAVE":
        raise WavError("not a WAVE file (bad form type at byte 8)")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(blob):
        cid = blob[off:off + 4]
        (clen,) = struct.unpack("<I", blob[off + 4:off + 8])
        body = blob[off + 8:off + 8 + clen]
        if len(body) < clen:
            raise WavError(f"truncated chunk '{cid.decode(errors='replace')}' at byte {off}")
        if cid == b"fmt ":
            if clen < 16:
                raise WavError(f"fmt chunk too short at byte {off}")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        off += 8 + clen + (clen & 1)
    if fmt is None:
        raise WavError(f"missing fmt chunk (scanned to byte {off})")
    if data is None:
        raise WavError(f"missing data chunk (scanned to byte {off})")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise WavError(f"unsupported encoding: format={audio_format}, bits={bits} (PCM16 required)")
    if channels != 1:
        raise WavError(f"unsupported channel count {channels} (mono required)")
    if rate != AUDIO_RATE:
        raise WavError(f"unsupported sample rate {rate} ({AUDIO_RATE} required)")
    return np.frombuffer(data[:len(data) - (len(data) % 2)], dtype="<i2").astype(np.int16)


def mel_filterbank(n_filters: int = AUDIO_DIM, n_fft: int = SAMPLES_PER_FRAME,
                   rate: int = AUDIO_RATE) -> np.ndarray:
    """Triangular mel filters over the rFFT bins, 0 Hz .. rate/2."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(to_mel(0.0), to_mel(rate / 2.0), n_filters + 2)
    hz_pts = from_mel(mel_pts)
    bin_freqs = np.arange(n_bins) * rate / n_fft
    bank = np.zeros((n_filters, n_bins))
    for j in range(n_filters):
        lo, mid, hi = hz_pts[j], hz_pts[j + 1], hz_pts[j + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - mid, 1e-9)
        bank[j] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


_MEL_BANK = None


def audio_features(samples: np.ndarray, frame_rate: int = FRAME_RATE) -> np.ndarray:
    """Per video frame: 26 log filter-bank energies over a 40 ms Hann window.

    Frame i is centered at (i + 0.5) / frame_rate seconds; edge windows are
    zero-padded. Returns [floor(duration * frame_rate), 26].
    """
    global _MEL_BANK
    if _MEL_BANK is None:
        _MEL_BANK = mel_filterbank()
    pcm = np.asarray(samples, dtype=np.float64) / 32768.0
    n_frames = int(np.floor(len(pcm) / AUDIO_RATE * frame_rate))
    win_len = int(0.040 * AUDIO_RATE)  # 640
    window = np.hanning(win_len)
    feats = np.empty((n_frames, AUDIO_DIM))
    for i in range(n_frames):
        center = int(round((i + 0.5) / frame_rate * AUDIO_RATE))
        start = center - win_len // 2
        seg = np.zeros(win_len)
        lo = max(0, start)
        hi = min(len(pcm), start + win_len)
        seg[lo - start:hi - start] = pcm[lo:hi]
        spec = np.abs(np.fft.rfft(seg * window)) ** 2
        feats[i] = np.log(_MEL_BANK @ spec + ENERGY_FLOOR)
    return feats


_VOICE_HARMONICS = ((220.0, 1.0), (440.0, 0.5), (880.0, 0.25))


def synthesize_voice(track: Sequence[MotionFrame], rate: int = AUDIO_RATE) -> np.ndarray:
    """PCM16 voice whose loudness follows the mouth-opening coefficient.

    The per-frame amplitude is exp(0.6 * beta[1]) scaled into int16 range,
    linearly interpolated between frame centers, so band log-energy is an
    affine function of beta[1] by construction.
    """
    n = len(track) * SAMPLES_PER_FRAME
    t = np.arange(n) / rate
    amp_frames = np.array([np.exp(0.6 * f.beta[1]) for f in track])
    centers = (np.arange(len(track)) + 0.5) * SAMPLES_PER_FRAME
    amp = np.interp(np.arange(n), centers, amp_frames)
    wave = np.zeros(n)
    for freq, gain in _VOICE_HARMONICS:
        wave += gain * np.sin(2.0 * np.pi * freq * t)
    wave *= amp * 1200.0
    return np.clip(np.round(wave), -32768, 32767).astype(np.int16)


# -- clips -------------------------------------------------------------------------


@dataclass
class SpriteClip:
    frames: List[np.ndarray]          # [3,H,W] each, in [-1, 1]
    motions: List[MotionFrame]
    audio_features: np.ndarray        # [T + lookahead, AUDIO_DIM]
    identity_seed: int
    dynamics_seed: int = 0
    size: int = 64

    def __post_init__(self):
        if len(self.frames) != len(self.motions):
            raise ValueError(
                f"clip has {len(self.frames)} frames but {len(self.motions)} motions")

    @property
    def length(self) -> int:
        return len(self.frames)


def generate_clip(identity_seed: int, length: int, dynamics_seed: int,
                  size: int = 64, lookahead: int = 6,
                  window_len: int = 27) -> SpriteClip:
    """Render a clip plus audio features covering ``lookahead`` extra frames."""
    if length < window_len:
        raise ValueError(f"clip length {length} shorter than descriptor window {window_len}")
    track = ou_track(length + lookahead, dynamics_seed)
    frames = [render_sprite(identity_seed, m, size) for m in track[:length]]
    pcm = synthesize_voice(track)
    feats = audio_features(pcm)
    return SpriteClip(frames=frames, motions=track[:length], audio_features=feats,
                      identity_seed=identity_seed, dynamics_seed=dynamics_seed, size=size)


# -- image <-> 8-bit PNG -------------------------------------------------------------


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float64) / 127.5 - 1.0


def save_png(path: str, img: np.ndarray) -> None:
    """img [3,H,W] in [-1,1] -> 8-bit RGB PNG."""
    Image.fromarray(image_to_u8(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8_to_image(arr.transpose(2, 0, 1))


# -- dataset storage ------------------------------------------------------------------


def save_clip(dirpath: str, clip: SpriteClip, with_wav: bool = False) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        save_png(os.path.join(dirpath, f"frame_{i:05d}.png"), frame)
    save_track(os.path.join(dirpath, "motions.jsonl"), clip.motions)
    save_array(dirpath, "audio_features", clip.audio_features)
    meta = {
        "identity_seed": clip.identity_seed,
        "dynamics_seed": clip.dynamics_seed,
        "length": clip.length,
        "size": clip.size,
    }
    with open(os.path.join(dirpath, "clip.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    if with_wav:
        write_wav(os.path.join(dirpath, "audio.wav"),
                  synthesize_voice(ou_track(clip.length + 6, clip.dynamics_seed)))


def load_clip(dirpath: str, load_frames: bool = True) -> SpriteClip:
    with open(os.path.join(dirpath, "clip.json")) as fh:
        meta = json.load(fh)
    motions = load_track(os.path.join(dirpath, "motions.jsonl"))
    frames = []
    if load_frames:
        frames = [load_png(os.path.join(dirpath, f"frame_{i:05d}.png"))
                  for i in range(meta["length"])]
    else:
        frames = [None] * meta["length"]  # type: ignore[list-item]
    feats = load_array(dirpath, "audio_features")
    return SpriteClip(frames=frames, motions=motions, audio_features=feats,
                      identity_seed=meta["identity_seed"], dynamics_seed=meta["dynamics_seed"],
                      size=meta["size"])


@dataclass
class DatasetManifest:
    root: str
    splits: Dict[str, List[str]]
    size: int
    clip_length: int

    def clip_dirs(self, split: str) -> List[str]:
        return [os.path.join(self.root, name) for name in self.splits[split]]


def synthesize_dataset(root: str, seed: int, n_train: int, n_val: int, n_test: int = 0,
                       clip_length: int = 48, size: int = 64) -> DatasetManifest:
    rng = Rng(seed).derive("dataset")
    splits: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
    counts = (("train", n_train), ("val", n_val), ("test", n_test))
    index = 0
    for split, count in counts:
        for _ in range(count):
            identity_seed = int(rng.integers(0, 2 ** 31))
            dynamics_seed = int(rng.integers(0, 2 ** 31))
            clip = generate_clip(identity_seed, clip_length, dynamics_seed, size=size)
            name = f"clip_{index:04d}"
            save_clip(os.path.join(root, name), clip)
            splits[split].append(name)
            index += 1
    manifest = {"splits": splits, "size": size, "clip_length": clip_length, "seed": seed}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return DatasetManifest(root=root, splits=splits, size=size, clip_length=clip_length)


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return DatasetManifest(root=root, splits=manifest["splits"], size=manifest["size"],
                           clip_length=manifest["clip_length"])


# -- linearized motion decoding -------------------------------------------------------

_DECODE_STEP = np.concatenate([
    np.full(BETA_DIM, 0.08),    # beta
    np.full(3, 0.02),           # euler
    np.full(3, 0.03),           # translation
    np.full(3, 0.02),           # crop
])


def _pool_image(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def motion_jacobian(identity_seed: int, reference: MotionFrame, size: int,
                    channels: Optional[Sequence[int]] = None,
                    pool: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobian of the (pooled) sprite renderer at a motion.

    Returns (J [pixels, n_channels], base render flattened).
    """
    channels = list(range(FRAME_DIM)) if channels is None else list(channels)
    base_vec = reference.to_vector()
    base = _pool_image(render_sprite(identity_seed, reference, size), pool).reshape(-1)
    cols = np.empty((base.size, len(channels)))
    for col, ch in enumerate(channels):
        h = _DECODE_STEP[ch]
        up_vec = base_vec.copy()
        up_vec[ch] += h
        dn_vec = base_vec.copy()
        dn_vec[ch] -= h
        up = _pool_image(render_sprite(identity_seed, MotionFrame.from_vector(up_vec), size),
                         pool).reshape(-1)
        dn = _pool_image(render_sprite(identity_seed, MotionFrame.from_vector(dn_vec), size),
                         pool).reshape(-1)
        cols[:, col] = (up - dn) / (2.0 * h)
    return cols, base


def background_image(identity_seed: int, size: int) -> np.ndarray:
    """The identity's background gradient alone, [3, size, size] in [-1, 1]."""
    ident = sprite_identity(identity_seed)
    px = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(px, px, indexing="xy")
    gu, gv = ident.bg_grad
    ramp = np.clip(0.5 + 0.5 * (gu * (u - 0.5) + gv * (v - 0.5)), 0.0, 1.0)
    img = ident.bg_color_a[:, None, None] * (1.0 - ramp) + ident.bg_color_b[:, None, None] * ramp
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


def estimate_face_center(image: np.ndarray, identity_seed: int) -> np.ndarray:
    """Foreground centroid in normalized coordinates (background subtracted)."""
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[-1]
    diff = np.abs(image - background_image(identity_seed, size)).sum(axis=0)
    total = diff.sum()
    if total <= 1e-9:
        return np.array([0.5, 0.5])
    px = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(px, px, indexing="xy")
    return np.array([(diff * u).sum() / total, (diff * v).sum() / total])


def bootstrap_translation(image: np.ndarray, identity_seed: int,
                          reference: MotionFrame) -> np.ndarray:
    """Initial (tx, ty) from matching foreground centroids against a reference render."""
    size = np.asarray(image).shape[-1]
    ref_center = estimate_face_center(render_sprite(identity_seed, reference, size), identity_seed)
    img_center = estimate_face_center(image, identity_seed)
    shift = img_center - ref_center
    vec = reference.to_vector()
    return vec[BETA_DIM + 3:BETA_DIM + 5] + shift / 0.25  # inverse of the placement gain


def decode_motion(image: np.ndarray, identity_seed: int, reference: MotionFrame,
                  channels: Optional[Sequence[int]] = None,
                  pyramid: Sequence[int] = (1,), iterations: int = 1,
                  center_bootstrap: bool = False, damping: float = 0.0) -> np.ndarray:
    """Least-squares motion estimate from an image via the sprite forward model.

    Gauss-Newton around ``reference``: relinearize ``iterations`` times per
    pyramid level (coarse to fine; pooling widens the convergence basin for
    large displacements). ``damping`` adds Tikhonov regularization pulling
    weakly observed channels toward the reference, which keeps rendering
    artifacts from being amplified through near-singular texture directions.
    This plays the role a face-reconstruction network plays on real footage:
    it maps an image back to coefficient space. Returns the estimated full
    73-vector (unsolved channels stay at the reference values).
    """
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[-1]
    channels = list(range(FRAME_DIM)) if channels is None else list(channels)
    est = reference.to_vector()
    if center_bootstrap:
        est[BETA_DIM + 3:BETA_DIM + 5] = bootstrap_translation(image, identity_seed, reference)
    for pool in pyramid:
        target = _pool_image(image, pool).reshape(-1)
        for _ in range(iterations):
            frame = MotionFrame.from_vector(est)
            jac, base = motion_jacobian(identity_seed, frame, size, channels, pool=pool)
            if damping > 0.0:
                normal = jac.T @ jac + damping ** 2 * np.eye(len(channels))
                delta = np.linalg.solve(normal, jac.T @ (target - base))
            else:
                delta, *_ = np.linalg.lstsq(jac, target - base, rcond=1e-6)
            for col, ch in enumerate(channels):
                est[ch] += delta[col]
            est[BETA_DIM + 6] = max(est[BETA_DIM + 6], 0.2)  # crop scale stays positive
    return est
