"""Staged training: warp pretraining, end-to-end refinement, and flow NLL.

Determinism contract: every stochastic choice (batch composition,
descriptor noise, init) is drawn from streams derived from (config seed,
stage, step), so a resumed run replays the exact step sequence of an
uninterrupted one and identical configs produce bit-identical checkpoints
on the same platform.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DatasetManifest, SpriteClip, load_clip, perturb_track
from .face import MotionFrame, window_descriptor, descriptors_to_tensor
from .flow import FlowConfig, NormFlowModel, build_condition, expression_flow_config, pose_flow_config
from .losses import FeatureExtractor, LossWeights, perceptual_distance, total_loss
from .nets import RendererConfig, RendererModel
from .rng import Rng
from .tensor import AdamState, Tensor, adam_step, backward, no_grad, zero_grads
from .tensor.optim import adam_state_arrays, load_adam_state_arrays
from .tensor.serialize import load_checkpoint, save_checkpoint


class TrainingError(RuntimeError):
    """Aborted training run (non-finite loss or parameters)."""


@dataclass
class TrainConfig:
    # Desk-scale defaults; the reference schedule this stands in for is
    # 200k + 200k steps at batch 20 with decay at 300k.
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_after_decay: float = 2e-5
    decay_step: Optional[int] = None     # global step; default stage1 + stage2/2
    seed: int = 0
    descriptor_mode: str = "windowed"    # or "single"
    noise_amplitude: float = 0.0         # descriptor coefficient noise
    image_size: int = 64
    window_len: int = 27
    base_channels: int = 16
    z_dim: int = 256
    feature_seed: int = 2024
    pair_min_gap: int = 5
    pyramid_levels: int = 3
    loss_warp: float = 2.5
    loss_reconstruction: float = 4.0
    loss_style: float = 1000.0
    flow_steps: int = 2000
    flow_tbptt: int = 16
    flow_batch: int = 8
    flow_lstm_hidden: int = 64
    checkpoint_every: int = 0            # 0 = only at the end

    def __post_init__(self):
        if min(self.stage1_steps, self.stage2_steps, self.flow_steps) <= 0:
            raise ValueError("step counts must be positive")
        if self.lr_initial <= 0 or self.lr_after_decay <= 0:
            raise ValueError("learning rates must be positive")
        if self.descriptor_mode not in ("windowed", "single"):
            raise ValueError(f"unknown descriptor_mode '{self.descriptor_mode}'")

    @property
    def effective_decay_step(self) -> int:
        return self.decay_step if self.decay_step is not None \
            else self.stage1_steps + self.stage2_steps // 2

    def renderer_config(self) -> RendererConfig:
        return RendererConfig(image_size=self.image_size, base_channels=self.base_channels,
                              z_dim=self.z_dim, window_len=self.window_len,
                              feature_seed=self.feature_seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_warp, self.loss_reconstruction, self.loss_style)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


class RunLog:
    """Append-only JSON-lines log with monotone step numbers."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.records: List[dict] = []
        self._last_step = -1

    def append(self, record: dict) -> None:
        if record["step"] <= self._last_step:
            raise ValueError(f"non-monotone run log: step {record['step']} after {self._last_step}")
        self._last_step = record["step"]
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @staticmethod
    def read(path: str) -> List[dict]:
        out = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out


class ClipCache:
    """Decoded clips held in memory; training batches index into it."""

    def __init__(self, manifest: DatasetManifest, split: str):
        self.clips: List[SpriteClip] = [load_clip(d) for d in manifest.clip_dirs(split)]
        if not self.clips:
            raise ValueError(f"dataset split '{split}' is empty")

    def __len__(self) -> int:
        return len(self.clips)


@dataclass
class RenderBatch:
    source: np.ndarray            # [N,3,H,W]
    target: np.ndarray            # [N,3,H,W]
    descriptors: List             # MotionDescriptor per sample
    clip_ids: List[int]
    target_frames: List[int]


def sample_render_batch(cache: ClipCache, config: TrainConfig, stage: str, step: int) -> RenderBatch:
    """Batch for one step, a pure function of (dataset, config, stage, step)."""
    rng = Rng(config.seed).derive("batch", stage, step)
    sources, targets, descriptors, clip_ids, tgt_frames = [], [], [], [], []
    for i in range(config.batch_size):
        ci = int(rng.integers(0, len(cache.clips)))
        clip = cache.clips[ci]
        n = clip.length
        src_idx = int(rng.integers(0, n))
        gap = min(config.pair_min_gap, max(0, (n - 1) // 2))
        # target at least `gap` frames away, same clip (same identity)
        tgt_idx = int(rng.integers(0, n - 2 * gap))
        if tgt_idx >= src_idx - gap:
            tgt_idx += 2 * gap + 1
        tgt_idx = min(max(tgt_idx, 0), n - 1)
        track = clip.motions
        if config.noise_amplitude > 0.0:
            track = perturb_track(track, config.noise_amplitude, rng.derive("noise", i))
        descriptors.append(window_descriptor(track, tgt_idx, config.window_len,
                                             mode=config.descriptor_mode))
        sources.append(clip.frames[src_idx])
        targets.append(clip.frames[tgt_idx])
        clip_ids.append(ci)
        tgt_frames.append(tgt_idx)
    return RenderBatch(np.stack(sources), np.stack(targets), descriptors, clip_ids, tgt_frames)


def _learning_rate(config: TrainConfig, global_step: int) -> float:
    return config.lr_initial if global_step < config.effective_decay_step else config.lr_after_decay


def _check_finite(loss_value: float, params: Sequence[Tensor], batch: RenderBatch,
                  out_dir: Optional[str], step: int) -> None:
    bad = not np.isfinite(loss_value)
    if not bad:
        for p in params:
            if not np.all(np.isfinite(p.data)):
                bad = True
                break
    if bad:
        if out_dir:
            dump = os.path.join(out_dir, f"diagnostic_step_{step}.npz")
            np.savez(dump, source=batch.source, target=batch.target,
                     clip_ids=np.array(batch.clip_ids), target_frames=np.array(batch.target_frames))
        raise TrainingError(f"non-finite loss or parameter at step {step}; batch dumped")


def _save_train_state(path: str, model, opt: AdamState, params: List[Tensor],
                      global_step: int, kind: str, extra: dict) -> None:
    arrays = dict(model.store.arrays())
    arrays.update(adam_state_arrays(opt, params))
    meta = {"global_step": global_step, "adam_step_count": opt.step_count}
    meta.update(extra)
    save_checkpoint(path, kind, arrays, meta)


@dataclass
class StageResult:
    checkpoint_dir: str
    run_log: RunLog
    final_stats: dict = field(default_factory=dict)


def train_renderer_stage1(config: TrainConfig, dataset: DatasetManifest, out_dir: str,
                          resume_from: Optional[str] = None,
                          stop_at_step: Optional[int] = None) -> StageResult:
    """Pretrain mapping + warping on the warp loss only; editing untouched."""
    os.makedirs(out_dir, exist_ok=True)
    cache = ClipCache(dataset, "train")
    model = RendererModel(config.renderer_config(), seed=config.seed)
    fx = FeatureExtractor(config.feature_seed)
    trained = model.mapping_params() + model.warping_params()
    opt = AdamState(learning_rate=config.lr_initial)
    start_step = 0
    if resume_from:
        arrays, manifest = load_checkpoint(resume_from, expect_kind="renderer_train_state")
        model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("adam_")})
        load_adam_state_arrays(opt, trained, arrays)
        opt.step_count = manifest["extra"]["adam_step_count"]
        start_step = manifest["extra"]["global_step"]
    log = RunLog(os.path.join(out_dir, "stage1_runlog.jsonl") if out_dir else None)
    weights = config.loss_weights()
    end_step = stop_at_step if stop_at_step is not None else config.stage1_steps
    for step in range(start_step, end_step):
        batch = sample_render_batch(cache, config, "stage1", step)
        src, tgt = Tensor(batch.source), Tensor(batch.target)
        descs = descriptors_to_tensor(batch.descriptors)
        z = model.map_motion(descs)
        flow = model.predict_flow(src, z)
        warped = model.warp_image(src, flow)
        l_w = perceptual_distance(warped, tgt, fx, config.pyramid_levels)
        loss = l_w * weights.warp
        zero_grads(trained)
        backward(loss)
        opt.learning_rate = _learning_rate(config, step)
        adam_step(trained, opt)
        _check_finite(loss.item(), trained, batch, out_dir, step)
        with no_grad():
            baseline = perceptual_distance(src, tgt, fx, config.pyramid_levels).item()
        log.append({
            "step": step, "stage": 1, "lr": opt.learning_rate,
            "loss": {"warp": l_w.item(), "total": loss.item(), "identity_baseline": baseline},
            "wall_time": time.time(),
            "rng_digest": Rng(config.seed).derive("batch", "stage1", step).digest(),
        })
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                and (step + 1) < end_step:
            _save_train_state(os.path.join(out_dir, f"state_step{step + 1:06d}"), model, opt,
                              trained, step + 1, "renderer_train_state",
                              {"model_config": model.cfg.to_json(), "stage": 1})
    ckpt = os.path.join(out_dir, "stage1_checkpoint")
    model.save(ckpt, extra={"stage": 1, "train_config": config.to_json()})
    if stop_at_step is not None and stop_at_step < config.stage1_steps:
        _save_train_state(os.path.join(out_dir, f"state_step{stop_at_step:06d}"), model, opt,
                          trained, stop_at_step, "renderer_train_state",
                          {"model_config": model.cfg.to_json(), "stage": 1})
    tail = [r["loss"]["warp"] for r in log.records[-100:]]
    tail_base = [r["loss"]["identity_baseline"] for r in log.records[-100:]]
    return StageResult(ckpt, log, {
        "final_warp_mean": float(np.mean(tail)) if tail else None,
        "identity_baseline_mean": float(np.mean(tail_base)) if tail_base else None,
    })


def train_renderer_stage2(config: TrainConfig, dataset: DatasetManifest, out_dir: str,
                          stage1_checkpoint: str) -> StageResult:
    """End-to-end training of all three networks on the full weighted loss."""
    os.makedirs(out_dir, exist_ok=True)
    cache = ClipCache(dataset, "train")
    model = RendererModel(config.renderer_config(), seed=config.seed)
    arrays, _ = load_checkpoint(stage1_checkpoint, expect_kind="renderer")
    model.load_arrays(arrays)
    fx = FeatureExtractor(config.feature_seed)
    trained = model.parameters()
    opt = AdamState(learning_rate=config.lr_initial)
    log = RunLog(os.path.join(out_dir, "stage2_runlog.jsonl") if out_dir else None)
    weights = config.loss_weights()
    for step in range(config.stage2_steps):
        global_step = config.stage1_steps + step
        batch = sample_render_batch(cache, config, "stage2", step)
        src, tgt = Tensor(batch.source), Tensor(batch.target)
        descs = descriptors_to_tensor(batch.descriptors)
        warped, edited, _, _ = model.render_full(src, descs)
        loss, breakdown = total_loss(warped, edited, tgt, weights, fx, config.pyramid_levels)
        zero_grads(trained)
        backward(loss)
        opt.learning_rate = _learning_rate(config, global_step)
        adam_step(trained, opt)
        _check_finite(loss.item(), trained, batch, out_dir, global_step)
        log.append({
            "step": global_step, "stage": 2, "lr": opt.learning_rate,
            "loss": breakdown,
            "wall_time": time.time(),
            "rng_digest": Rng(config.seed).derive("batch", "stage2", step).digest(),
        })
    ckpt = os.path.join(out_dir, "stage2_checkpoint")
    model.save(ckpt, extra={"stage": 2, "train_config": config.to_json()})
    head = [r["loss"]["total"] for r in log.records[:100]]
    tail = [r["loss"]["total"] for r in log.records[-100:]]
    return StageResult(ckpt, log, {
        "leading_total_median": float(np.median(head)),
        "trailing_total_median": float(np.median(tail)),
    })


# -- flow training -----------------------------------------------------------------


def flow_config_for(config: TrainConfig, which: str) -> FlowConfig:
    if which == "expression":
        return expression_flow_config(lstm_hidden=config.flow_lstm_hidden)
    if which == "pose":
        return pose_flow_config(lstm_hidden=config.flow_lstm_hidden)
    raise ValueError(f"unknown flow '{which}' (expected 'expression' or 'pose')")


def _flow_channels(frame: MotionFrame, which: str) -> np.ndarray:
    return frame.beta if which == "expression" else frame.pose_vector()


def _teacher_condition(cfg: FlowConfig, vecs: List[np.ndarray], audio: np.ndarray,
                       t: int) -> np.ndarray:
    """Ground-truth history window (clamped at the clip start) for frame t."""
    history = [vecs[t - cfg.history + j] if t - cfg.history + j >= 0 else vecs[0]
               for j in range(cfg.history)]
    return build_condition(cfg, history, audio, t,
                           initial=vecs[0] if cfg.condition_initial else None)


def _batched_segment_nll(model: NormFlowModel, clips: List[SpriteClip], starts: List[int],
                         length: int, which: str) -> Tensor:
    """Teacher-forced mean NLL over same-length segments, one per batch lane."""
    cfg = model.cfg
    state = model.init_state(len(clips))
    all_vecs = [[_flow_channels(m, which) for m in clip.motions] for clip in clips]
    terms = []
    for offset in range(length):
        p_rows, c_rows = [], []
        for lane, clip in enumerate(clips):
            t = starts[lane] + offset
            p_rows.append(all_vecs[lane][t])
            c_rows.append(_teacher_condition(cfg, all_vecs[lane], clip.audio_features, t))
        nll, state = model.nll_loss(Tensor(np.stack(p_rows)), Tensor(np.stack(c_rows)), state)
        terms.append(nll)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def heldout_flow_nll(model: NormFlowModel, cache: ClipCache, which: str) -> float:
    """Median per-step NLL over whole held-out clips (teacher forcing)."""
    cfg = model.cfg
    values = []
    with no_grad():
        for clip in cache.clips:
            state = model.init_state(1)
            vecs = [_flow_channels(m, which) for m in clip.motions]
            for t in range(clip.length):
                cond = _teacher_condition(cfg, vecs, clip.audio_features, t)
                nll, state = model.nll_loss(Tensor(vecs[t][None, :]), Tensor(cond[None, :]), state)
                values.append(nll.item())
    return float(np.median(values))


def train_flow(config: TrainConfig, dataset: DatasetManifest, out_dir: str, which: str,
               eval_heldout: bool = True) -> StageResult:
    """NLL training with truncated backpropagation through time."""
    os.makedirs(out_dir, exist_ok=True)
    cache = ClipCache(dataset, "train")
    fcfg = flow_config_for(config, which)
    model = NormFlowModel(fcfg, seed=config.seed, which=which)
    params = model.parameters()
    opt = AdamState(learning_rate=config.lr_initial)
    log = RunLog(os.path.join(out_dir, f"flow_{which}_runlog.jsonl") if out_dir else None)
    initial_nll = None
    val_cache = ClipCache(dataset, "val") if eval_heldout else None
    if eval_heldout:
        initial_nll = heldout_flow_nll(model, val_cache, which)
    min_len = min(c.length for c in cache.clips)
    seg = min(config.flow_tbptt, min_len)
    for step in range(config.flow_steps):
        rng = Rng(config.seed).derive("flowbatch", which, step)
        zero_grads(params)
        clips, starts = [], []
        for _ in range(config.flow_batch):
            clip = cache.clips[int(rng.integers(0, len(cache.clips)))]
            clips.append(clip)
            starts.append(int(rng.integers(0, clip.length - seg + 1)))
        loss = _batched_segment_nll(model, clips, starts, seg, which)
        backward(loss)
        opt.learning_rate = _learning_rate(config, step)
        adam_step(params, opt)
        if not np.isfinite(loss.item()) or any(not np.all(np.isfinite(p.data)) for p in params):
            raise TrainingError(f"non-finite flow loss/parameters at step {step}")
        log.append({
            "step": step, "stage": f"flow_{which}", "lr": opt.learning_rate,
            "loss": {"nll": loss.item()},
            "wall_time": time.time(),
            "rng_digest": rng.digest(),
        })
    ckpt = os.path.join(out_dir, f"flow_{which}_checkpoint")
    model.save(ckpt, extra={"train_config": config.to_json()})
    final_nll = heldout_flow_nll(model, val_cache, which) if eval_heldout else None
    return StageResult(ckpt, log, {
        "initial_heldout_nll": initial_nll,
        "final_heldout_nll": final_nll,
    })
