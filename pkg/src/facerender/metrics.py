"""Motion-accuracy and feature-space image metrics.

AED/APD compare coefficient tracks directly. Image realism and
reconstruction quality are measured in the frozen extractor's feature
space: a Frechet distance over pooled deepest-layer statistics and a
perceptual distance over activation maps. These are in-repo analogs of
the usual pretrained-backbone metrics; absolute values are only
comparable within this repository.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import decode_motion
from .face import BETA_DIM, MotionFrame, window_descriptor, wrap_angle, descriptors_to_tensor
from .losses import FeatureExtractor, perceptual_distance
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class EvalReport:
    aed: float
    apd: float
    fpd: float
    ffd: float
    n_samples: int
    config_digest: str = ""

    def __post_init__(self):
        values = (self.aed, self.apd, self.fpd, self.ffd)
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ValueError(f"metrics must be finite and non-negative, got {values}")

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in asdict(self).items():
                writer.writerow([key, value])


def aed(pred_motions: Sequence[MotionFrame], true_motions: Sequence[MotionFrame]) -> float:
    """Mean l2 distance between expression coefficient vectors."""
    if len(pred_motions) != len(true_motions):
        raise ValueError(f"motion lists differ in length: {len(pred_motions)} vs {len(true_motions)}")
    if not pred_motions:
        raise ValueError("empty motion lists")
    dists = [float(np.linalg.norm(p.beta - t.beta)) for p, t in zip(pred_motions, true_motions)]
    return float(np.mean(dists))


def apd(pred_motions: Sequence[MotionFrame], true_motions: Sequence[MotionFrame]) -> float:
    """Mean l1 distance over (euler, translation); angles wrapped before differencing."""
    if len(pred_motions) != len(true_motions):
        raise ValueError(f"motion lists differ in length: {len(pred_motions)} vs {len(true_motions)}")
    if not pred_motions:
        raise ValueError("empty motion lists")
    dists = []
    for p, t in zip(pred_motions, true_motions):
        d_rot = np.abs(wrap_angle(p.rotation - t.rotation))
        d_tr = np.abs(p.translation - t.translation)
        dists.append(float(d_rot.sum() + d_tr.sum()))
    return float(np.mean(dists))


# -- Frechet distance -----------------------------------------------------------


def _moments(feats: np.ndarray, shrinkage: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    centered = feats - mu
    n, d = feats.shape
    cov = centered.T @ centered / max(n - 1, 1)
    if n < d + 1:
        # Rank-deficient sample covariance: shrink toward a scaled identity.
        cov = cov + shrinkage * max(np.trace(cov) / d, 1.0) * np.eye(d)
    return mu, cov


def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray,
                         cov_b: np.ndarray, clamp_report: Optional[dict] = None) -> float:
    """||mu_a-mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}).

    The cross term uses the symmetrized product A^{1/2} cov_b A^{1/2}; its
    eigenvalues are clamped at zero and the clamp magnitude is reported when
    it exceeds 1e-6 (conditioning warning).
    """
    va, ua = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    sqrt_a = (ua * np.sqrt(np.clip(va, 0.0, None))) @ ua.T
    inner = sqrt_a @ ((cov_b + cov_b.T) / 2.0) @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    clamp = float(-vals.min()) if vals.min() < 0 else 0.0
    if clamp_report is not None:
        clamp_report["eigenvalue_clamp"] = clamp
    if clamp > 1e-6:
        import warnings

        warnings.warn(f"frechet distance: clamped negative eigenvalue of magnitude {clamp:.3e}")
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(dist, 0.0)


def feature_frechet_distance(set_a: np.ndarray, set_b: np.ndarray,
                             fx: FeatureExtractor) -> float:
    """Frechet distance between pooled deepest-layer feature distributions.

    ``set_a``/``set_b`` are image stacks [N,3,H,W] in [-1,1]; each set must
    be non-empty (covariance shrinkage handles small sets).
    """
    set_a, set_b = np.asarray(set_a), np.asarray(set_b)
    if set_a.ndim != 4 or set_b.ndim != 4 or set_a.shape[0] == 0 or set_b.shape[0] == 0:
        raise ValueError("feature_frechet_distance: need non-empty [N,3,H,W] image sets")
    with no_grad():
        feats_a = fx.pooled(Tensor(set_a))
        feats_b = fx.pooled(Tensor(set_b))
    mu_a, cov_a = _moments(feats_a)
    mu_b, cov_b = _moments(feats_b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def feature_perceptual_distance(a: np.ndarray, b: np.ndarray, fx: FeatureExtractor,
                                levels: int = 3) -> float:
    """Pairwise perceptual distance in extractor feature space (LPIPS analog)."""
    ta = Tensor(np.asarray(a)[None] if np.asarray(a).ndim == 3 else np.asarray(a))
    tb = Tensor(np.asarray(b)[None] if np.asarray(b).ndim == 3 else np.asarray(b))
    with no_grad():
        return float(perceptual_distance(ta, tb, fx, levels).data)


# -- renderer evaluation -----------------------------------------------------------


@dataclass
class RendererEval:
    fpd: float
    aed: float
    apd: float
    ffd: float
    n_pairs: int


DECODE_DAMPING = 0.3  # Tikhonov weight for coefficient decoding in evaluations


def evaluate_renderer(model, cache_clips, fx: FeatureExtractor, n_pairs: int,
                      descriptor_mode: str, noise_amplitude: float, seed: int,
                      window_len: int, pyramid_levels: int = 3,
                      pair_min_gap: int = 5) -> RendererEval:
    """Same-identity reconstruction metrics on held-out clips.

    For each sampled (source, target) pair the model renders the target from
    a (optionally noise-corrupted) descriptor; FPD compares the render with
    the true target image, and AED/APD compare motion coefficients decoded
    from the render (damped inverse sprite rendering) with the ground truth.
    Noise realizations are keyed by (seed, pair), so windowed and
    single-frame models are scored on identical corrupted tracks.
    """
    from .train import ClipCache  # imported here to avoid a module cycle

    clips = cache_clips.clips if isinstance(cache_clips, ClipCache) else list(cache_clips)
    renders, targets = [], []
    pred_frames, true_frames = [], []
    fpd_values = []
    for pair in range(n_pairs):
        rng = Rng(seed).derive("eval-pair", pair)
        clip = clips[pair % len(clips)]
        n = clip.length
        src_idx = int(rng.integers(0, n))
        gap = min(pair_min_gap, max(0, (n - 1) // 2))
        tgt_idx = int(rng.integers(0, max(n - 2 * gap, 1)))
        if tgt_idx >= src_idx - gap:
            tgt_idx = min(tgt_idx + 2 * gap + 1, n - 1)
        track = clip.motions
        if noise_amplitude > 0.0:
            from .data import perturb_track

            track = perturb_track(track, noise_amplitude, rng.derive("noise"))
        descriptor = window_descriptor(track, tgt_idx, window_len, mode=descriptor_mode)
        src = Tensor(clip.frames[src_idx][None])
        with no_grad():
            _, edited, _, _ = model.render_full(src, descriptors_to_tensor([descriptor]))
        render = edited.data[0]
        true_motion = clip.motions[tgt_idx]
        est_vec = decode_motion(render, clip.identity_seed, true_motion,
                                damping=DECODE_DAMPING)
        est_vec[BETA_DIM:BETA_DIM + 3] = wrap_angle(est_vec[BETA_DIM:BETA_DIM + 3])
        est_vec[BETA_DIM + 6] = max(est_vec[BETA_DIM + 6], 0.05)  # keep crop scale positive
        pred_frames.append(MotionFrame.from_vector(est_vec))
        true_frames.append(true_motion)
        fpd_values.append(feature_perceptual_distance(render, clip.frames[tgt_idx], fx,
                                                      pyramid_levels))
        renders.append(render)
        targets.append(clip.frames[tgt_idx])
    return RendererEval(
        fpd=float(np.mean(fpd_values)),
        aed=aed(pred_frames, true_frames),
        apd=apd(pred_frames, true_frames),
        ffd=feature_frechet_distance(np.stack(renders), np.stack(targets), fx),
        n_pairs=n_pairs,
    )
