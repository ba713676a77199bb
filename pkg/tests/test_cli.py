"""CLI contract: subcommands, exit codes, and reproducible file outputs."""

import hashlib
import json
import os

import numpy as np
import pytest

from facerender.cli import main
from facerender.data import (
    load_png,
    ou_track,
    render_sprite,
    save_png,
    synthesize_voice,
    write_wav,
)
from facerender.face import MotionFrame, save_track


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, tiny_checkpoints):
    root = tmp_path_factory.mktemp("cliwork")
    track = ou_track(12, 77)
    src_path = str(root / "source.png")
    save_png(src_path, render_sprite(55, track[0], 32))
    motion_path = str(root / "motion.json")
    with open(motion_path, "w") as fh:
        json.dump(track[3].to_json_dict(), fh)
    motion2_path = str(root / "motion2.json")
    with open(motion2_path, "w") as fh:
        json.dump(track[8].to_json_dict(), fh)
    track_path = str(root / "track.jsonl")
    save_track(track_path, track)
    wav_path = str(root / "voice.wav")
    write_wav(wav_path, synthesize_voice(ou_track(25, 12)))  # 1 s of audio
    return {
        "root": str(root),
        "source": src_path,
        "motion": motion_path,
        "motion2": motion2_path,
        "track": track_path,
        "wav": wav_path,
        "checkpoint": tiny_checkpoints["stage2"],
    }


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        code = main(["render", "--does-not-exist", "x"])
        assert code == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert main(["explode"]) == 1

    def test_runtime_failure_is_two(self, workdir, capsys):
        code = main(["train-renderer", "--dataset", os.path.join(workdir["root"], "missing"),
                     "--out", os.path.join(workdir["root"], "o"), "--stage", "1"])
        assert code == 2
        assert "error" in capsys.readouterr().err.lower()


class TestDatasetSynth:
    def test_writes_manifest_with_clip_count(self, tmp_path, capsys):
        cfg = tmp_path / "ds.json"
        cfg.write_text(json.dumps({"n_train": 2, "n_val": 1, "clip_length": 30, "size": 32}))
        out = str(tmp_path / "ds")
        assert main(["dataset-synth", "--config", str(cfg), "--out", out, "--seed", "3"]) == 0
        with open(os.path.join(out, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert len(manifest["splits"]["train"]) == 2
        assert len(manifest["splits"]["val"]) == 1
        assert os.path.isdir(os.path.join(out, manifest["splits"]["train"][0]))


class TestRender:
    def test_deterministic_output_hash(self, workdir, tmp_path):
        out1 = str(tmp_path / "r1.png")
        out2 = str(tmp_path / "r2.png")
        for out in (out1, out2):
            assert main(["render", "--checkpoint", workdir["checkpoint"],
                         "--source", workdir["source"], "--motion", workdir["motion"],
                         "--out", out]) == 0
        assert sha(out1) == sha(out2)

    def test_interpolate_alpha_one_matches_direct_render(self, workdir, tmp_path):
        direct = str(tmp_path / "direct.png")
        interp = str(tmp_path / "interp.png")
        assert main(["render", "--checkpoint", workdir["checkpoint"],
                     "--source", workdir["source"], "--motion", workdir["motion"],
                     "--out", direct]) == 0
        assert main(["interpolate", "--checkpoint", workdir["checkpoint"],
                     "--source", workdir["source"], "--p1", workdir["motion"],
                     "--p2", workdir["motion2"], "--alpha", "1.0", "--out", interp]) == 0
        assert sha(direct) == sha(interp)

    def test_interpolate_alpha_out_of_range(self, workdir, tmp_path):
        code = main(["interpolate", "--checkpoint", workdir["checkpoint"],
                     "--source", workdir["source"], "--p1", workdir["motion"],
                     "--p2", workdir["motion2"], "--alpha", "1.5",
                     "--out", str(tmp_path / "x.png")])
        assert code == 1


class TestReenact:
    def test_writes_one_frame_per_track_entry(self, workdir, tmp_path):
        out = str(tmp_path / "frames")
        assert main(["reenact", "--checkpoint", workdir["checkpoint"],
                     "--source", workdir["source"], "--driving", workdir["track"],
                     "--out", out]) == 0
        assert len([f for f in os.listdir(out) if f.endswith(".png")]) == 12


class TestAudioDrive:
    @pytest.fixture(scope="class")
    def flow_dir(self, tmp_path_factory, small_dataset, small_train_config):
        from dataclasses import replace

        from facerender.train import train_flow

        out = str(tmp_path_factory.mktemp("flows"))
        cfg = replace(small_train_config, flow_steps=12)
        train_flow(cfg, small_dataset, out, "expression", eval_heldout=False)
        train_flow(cfg, small_dataset, out, "pose", eval_heldout=False)
        return out

    def test_frame_count_is_duration_times_fps(self, workdir, flow_dir, tmp_path):
        out = str(tmp_path / "drive")
        assert main(["audio-drive", "--checkpoint", workdir["checkpoint"],
                     "--flow", flow_dir, "--source", workdir["source"],
                     "--wav", workdir["wav"], "--temperature", "0", "--out", out]) == 0
        frames = [f for f in os.listdir(out) if f.endswith(".png")]
        assert len(frames) == 25  # 1 s of 16 kHz audio at 25 fps

    def test_temperature_zero_deterministic(self, workdir, flow_dir, tmp_path):
        outs = [str(tmp_path / f"d{i}") for i in range(2)]
        for out in outs:
            assert main(["audio-drive", "--checkpoint", workdir["checkpoint"],
                         "--flow", flow_dir, "--source", workdir["source"],
                         "--wav", workdir["wav"], "--temperature", "0", "--out", out]) == 0
        assert sha(os.path.join(outs[0], "frame_00010.png")) == \
            sha(os.path.join(outs[1], "frame_00010.png"))


class TestEval:
    def test_writes_report(self, workdir, small_dataset, tmp_path):
        out = str(tmp_path / "eval")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"image_size": 32, "window_len": 9, "base_channels": 8,
                                   "z_dim": 32, "seed": 7}))
        assert main(["eval", "--config", str(cfg), "--checkpoint", workdir["checkpoint"],
                     "--dataset", small_dataset.root, "--pairs", "4", "--out", out]) == 0
        with open(os.path.join(out, "eval_report.json")) as fh:
            report = json.load(fh)
        assert set(report) >= {"aed", "apd", "fpd", "ffd", "n_samples"}
        assert report["n_samples"] == 4
