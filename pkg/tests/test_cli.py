import json

import pytest

from vapbc import cli
from vapbc.errors import InvalidConfig
from vapbc.synth import corpus_digest

SUBCOMMANDS = ["synth", "pretrain", "finetune", "eval", "zeroshot", "rtf", "stream"]
TINY = ["--d-channel", "16", "--n-heads", "2", "--n-mels", "8", "--max-context", "64"]
FAST = ["--lr", "0.003", "--batch-frames", "40", "--batch-size", "2", "--max-steps", "6", "--val-interval", "3"]


@pytest.mark.parametrize("sub", SUBCOMMANDS + [None])
def test_help_exits_zero(sub, capsys):
    argv = ([sub] if sub else []) + ["--help"]
    assert cli.main(argv) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert cli.main(["eval", "--ckpt", "missing.bin", "--data", ".", "--out", "x"]) == 1
    assert "checkpoint not found: missing.bin" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["eval"]) == 1


def test_config_loading(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"lr": 0.5}, "model": {"d_channel": 24}}))
    assert cli.load_config(p, "train") == {"lr": 0.5}
    assert cli.load_config(p, "synth") == {}
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"seed": 4}))
    assert cli.load_config(flat, "synth") == {"seed": 4}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {}, "optimizer": {}}))
    with pytest.raises(InvalidConfig):
        cli.load_config(bad, "train")
    bad.write_text("{")
    with pytest.raises(InvalidConfig):
        cli.load_config(bad, "train")


def test_flag_beats_file_beats_default():
    from vapbc.model import ModelConfig
    from vapbc.training import TrainConfig

    cfg = cli.resolve(TrainConfig, {"lr": 0.5, "gamma": 2.0}, {"lr": 0.01, "gamma": None})
    assert cfg.lr == 0.01 and cfg.gamma == 2.0 and cfg.positive_weight == 5.0
    m = cli.resolve(ModelConfig, {"d_channel": 24, "frame_rate": 50}, {"frame_rate": 10, "d_channel": None})
    assert m.d_channel == 24 and m.frame_rate == 10 and m.n_heads == ModelConfig().n_heads


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "synth": {"session_duration": 30, "sessions": {"train": 2, "val": 1, "test": 1}},
        "train": {"lr": 0.5, "gamma": 2.0, "patience": 7},
        "model": {"d_channel": 24, "frame_rate": 10},
    }))
    data = root / "data"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(data), "--seed", "3"]) == 0
    pt = root / "pt.bin"
    assert cli.main(["pretrain", "--data", str(data), "--out", str(pt), "--config", str(cfg), *TINY, *FAST]) == 0
    ft = root / "ft.bin"
    assert cli.main(["finetune", "--data", str(data), "--out", str(ft), "--pretrained", str(pt), "--config", str(cfg),
                     "--method", "mt_pt", "--task", "type", *FAST]) == 0
    ev = root / "eval"
    assert cli.main(["eval", "--ckpt", str(ft), "--data", str(data), "--out", str(ev), "--task", "type",
                     "--context", "3", "6"]) == 0
    zs = root / "zs"
    assert cli.main(["zeroshot", "--ckpt", str(pt), "--data", str(data), "--out", str(zs), "--context", "6"]) == 0
    return dict(root=root, cfg=cfg, data=data, pt=pt, ft=ft, eval=ev, zs=zs)


def test_synth_manifest(pipeline):
    man = json.loads((pipeline["data"] / "run_manifest.json").read_text())
    assert man["command"] == "synth" and man["seeds"] == {"seed": 3}
    assert man["config"]["session_duration"] == 30
    assert str(pipeline["cfg"]) in man["inputs"]


def test_training_manifests_record_precedence(pipeline):
    man = json.loads((pipeline["root"] / "pt.bin.manifest.json").read_text())
    assert man["config"]["train"]["lr"] == 0.003          # flag over file
    assert man["config"]["train"]["gamma"] == 2.0         # file over default
    assert man["config"]["train"]["patience"] == 7
    assert man["config"]["model"]["d_channel"] == 16      # flag over file
    assert man["config"]["model"]["frame_rate"] == 10
    assert man["inputs"][str(pipeline["data"])] == corpus_digest(pipeline["data"])
    ft = json.loads((pipeline["root"] / "ft.bin.manifest.json").read_text())
    assert ft["config"]["train"]["method"] == "mt_pt" and ft["config"]["model"]["bc_classes"] == 3
    assert str(pipeline["pt"]) in ft["inputs"]
    log = (pipeline["root"] / "ft.log.jsonl").read_text().splitlines()
    assert len(log) == 6


def test_eval_outputs(pipeline):
    recs = [json.loads(l) for l in (pipeline["eval"] / "report.jsonl").read_text().splitlines()]
    assert [(r["context"], r["class"]) for r in recs] == [(3.0, "continuer"), (3.0, "assessment"),
                                                         (6.0, "continuer"), (6.0, "assessment")]
    assert all(0 <= r["f1"] <= 1 for r in recs)
    table = (pipeline["eval"] / "table.txt").read_text()
    assert "continuer" in table and "assessment" in table
    man = json.loads((pipeline["eval"] / "run_manifest.json").read_text())
    assert man["command"] == "eval" and str(pipeline["ft"]) in man["inputs"]
    zs = [json.loads(l) for l in (pipeline["zs"] / "report.jsonl").read_text().splitlines()]
    assert zs[0]["method"] == "zero-shot"


def test_context_beyond_the_model_is_rejected(pipeline):
    # 30 s sessions exceed the 64-frame positional table.
    assert cli.main(["zeroshot", "--ckpt", str(pipeline["pt"]), "--data", str(pipeline["data"]),
                     "--out", str(pipeline["root"] / "zs_full")]) == 1


def test_task_mismatch_is_rejected(pipeline, capsys):
    code = cli.main(["eval", "--ckpt", str(pipeline["ft"]), "--data", str(pipeline["data"]),
                     "--out", str(pipeline["root"] / "bad"), "--task", "timing"])
    assert code == 1


def test_rtf_command(pipeline, tmp_path):
    import numpy as np

    from vapbc.audio import StereoAudio, write_wav_stereo
    from vapbc.model import ModelConfig, init_model, store_checkpoint

    ck = tmp_path / "ref.bin"
    store_checkpoint(init_model(ModelConfig(encoder="reference", d_channel=16, n_heads=2, max_context=64)), ck)
    wav = tmp_path / "a.wav"
    write_wav_stereo(wav, StereoAudio(0.05 * np.random.default_rng(0).standard_normal((2, 16000 * 61))))
    out = tmp_path / "rtf.json"
    assert cli.main(["rtf", "--ckpt", str(ck), "--audio", str(wav), "--context", "1", "--repeats", "1",
                     "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res[0]["context"] == 1.0 and res[0]["rtf"] > 0
    assert cli.main(["rtf", "--ckpt", str(ck), "--audio", str(pipeline["data"] / "none.wav")]) == 1


def test_stream_requires_an_endpoint(tmp_path):
    from vapbc.model import ModelConfig, init_model, store_checkpoint

    ck = tmp_path / "ref.bin"
    store_checkpoint(init_model(ModelConfig(encoder="reference", d_channel=16, n_heads=2, max_context=64)), ck)
    assert cli.main(["stream", "--ckpt", str(ck)]) == 1
    assert cli.main(["stream", "--ckpt", str(ck), "--frame-rate", "50", "--stdio"]) == 1
