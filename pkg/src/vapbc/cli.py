"""Command-line entry point.

Configuration files are JSON objects with optional sections ``synth``,
``model``, ``train`` and ``data``; a flat object is read as the section of
the running subcommand. Values resolve as flag > config file > default.

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .errors import BindError, VapError

logger = logging.getLogger("vapbc")

SECTIONS = ("synth", "model", "train", "data")


class UsageError(VapError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ----------------------------------------------------------

def load_config(path, section: str) -> dict:
    """One section of a JSON config file; missing file -> NotFound."""
    from .errors import InvalidConfig, NotFound

    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise NotFound(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{p}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"{p}: expected a JSON object")
    if any(k in SECTIONS for k in data):
        extra = set(data) - set(SECTIONS)
        if extra:
            raise InvalidConfig(f"{p}: unknown sections {sorted(extra)}")
        return dict(data.get(section, {}))
    return dict(data)


def resolve(cls, file_values: dict, flags: dict):
    """Build ``cls`` from defaults, then file values, then non-None flags."""
    names = {f.name for f in fields(cls)}
    merged = dict(file_values)
    merged.update({k: v for k, v in flags.items() if k in names and v is not None})
    return cls.from_dict(merged)


def _flag_values(args, names) -> dict:
    return {n: getattr(args, n, None) for n in names}


# -- run manifests ------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digest(path) -> str:
    from .synth import corpus_digest

    p = Path(path)
    return corpus_digest(p) if p.is_dir() else file_digest(p)


def write_manifest(path, command: str, argv, config: dict, seeds: dict, inputs: dict, outputs: list) -> None:
    import numpy
    import torch

    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {str(k): input_digest(k) for k in inputs if k is not None},
        "outputs": [str(o) for o in outputs],
        "version": __version__,
        "environment": {"python": platform.python_version(), "numpy": numpy.__version__, "torch": torch.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def _manifest_for(out) -> Path:
    out = Path(out)
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args, argv) -> None:
    from .synth import SynthConfig, generate_corpus

    cfg = resolve(SynthConfig, load_config(args.config, "synth"), {"seed": args.seed})
    summary = generate_corpus(cfg, args.out)
    write_manifest(_manifest_for(args.out), "synth", argv, cfg.to_dict(), {"seed": cfg.seed},
                   [args.config], [args.out])
    print(f"wrote {summary['sessions']} sessions ({summary['hours']:.2f} h) to {args.out}", file=sys.stderr)


_MODEL_FLAGS = ("d_channel", "n_heads", "frame_rate", "max_context", "encoder", "n_mels")
_TRAIN_FLAGS = ("alpha", "beta", "gamma", "positive_weight", "lr", "batch_frames", "batch_size", "max_steps",
                "val_interval", "patience", "seed")


def _datasets(args, model_cfg, task):
    from .labeling import DatasetConfig, assemble_dataset

    dcfg = resolve(DatasetConfig, load_config(args.config, "data") | {"frame_rate": model_cfg.frame_rate,
                                                                      "n_mels": model_cfg.n_mels},
                   {"interior": getattr(args, "interior", None), "lead": getattr(args, "lead", None)})
    if model_cfg.encoder == "external":
        dcfg.features = "external"
    train = assemble_dataset(args.data, "train", task, dcfg)
    val = assemble_dataset(args.data, "val", task, dcfg)
    return train, val, dcfg


def cmd_pretrain(args, argv) -> None:
    from .model import ModelConfig
    from .training import TrainConfig, pretrain

    model_cfg = resolve(ModelConfig, load_config(args.config, "model"), _flag_values(args, _MODEL_FLAGS))
    tfile = load_config(args.config, "train") | {"stage": "pretrain"}
    cfg = resolve(TrainConfig, tfile, _flag_values(args, _TRAIN_FLAGS))
    train, val, dcfg = _datasets(args, model_cfg, "binary")
    log = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    res = pretrain(None, train, val, cfg, model_cfg, args.out, log)
    write_manifest(_manifest_for(args.out), "pretrain", argv,
                   {"model": model_cfg.to_dict(), "train": asdict(cfg), "data": _data_dict(dcfg)},
                   {"train": cfg.seed, "model": model_cfg.seed}, [args.data, args.config], [args.out, log])
    print(f"pretrained: best step {res.best_step}, val l_vap {res.best_metric:.4f}", file=sys.stderr)


def _data_dict(dcfg) -> dict:
    d = asdict(dcfg)
    d["grid"] = {"boundaries_ms": list(dcfg.grid.boundaries_ms), "activity_threshold": dcfg.grid.activity_threshold}
    return d


def cmd_finetune(args, argv) -> None:
    from .model import ModelConfig, read_checkpoint
    from .training import TrainConfig, finetune

    tfile = load_config(args.config, "train") | {"stage": "finetune"}
    flags = _flag_values(args, _TRAIN_FLAGS) | {"method": args.method, "task": args.task}
    method = flags["method"] or tfile.get("method", "mt_pt")
    # A pre-trained checkpoint fixes the architecture; only explicit flags may contradict it.
    if method in ("st_pt", "mt_pt") and args.pretrained and Path(args.pretrained).is_file():
        base = read_checkpoint(args.pretrained)[0].to_dict()
    else:
        base = load_config(args.config, "model")
    model_cfg = resolve(ModelConfig, base, _flag_values(args, _MODEL_FLAGS))
    if method != "mt_pt":
        tfile.setdefault("alpha", 0.0)
        tfile.setdefault("beta", 0.0)
    cfg = resolve(TrainConfig, tfile, flags)
    train, val, dcfg = _datasets(args, model_cfg, cfg.task)
    log = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    res = finetune(train, val, cfg, model_cfg, args.pretrained, args.out, log)
    write_manifest(_manifest_for(args.out), "finetune", argv,
                   {"model": res.model.cfg.to_dict(), "train": asdict(cfg), "data": _data_dict(dcfg)},
                   {"train": cfg.seed}, [args.data, args.config, args.pretrained], [args.out, log])
    print(f"fine-tuned {cfg.method}/{cfg.task}: best step {res.best_step}, val F1 {res.best_metric:.4f}",
          file=sys.stderr)


def _load(ckpt, task=None):
    from .errors import NotFound
    from .labeling import task_classes
    from .model import load_checkpoint

    if not Path(ckpt).is_file():
        raise NotFound(f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt, task_classes(task) if task else None)


def _eval_data(args, model, task, manipulation="none"):
    from .labeling import DatasetConfig, assemble_dataset

    dcfg = resolve(DatasetConfig, load_config(args.config, "data") | {"frame_rate": model.cfg.frame_rate,
                                                                      "n_mels": model.cfg.n_mels},
                   {"interior": getattr(args, "interior", None)})
    if model.cfg.encoder == "external":
        dcfg.features = "external"
    val = assemble_dataset(args.data, "val", task, dcfg)
    test = assemble_dataset(args.data, "test", task, dcfg, manipulation, getattr(args, "manipulated_root", None))
    return val, test, dcfg


def _contexts(values) -> list:
    return [None if v in ("full", "none") else float(v) for v in values]


def cmd_eval(args, argv) -> None:
    from .evaluation import evaluate_run, format_table, predict_dataset, tune_thresholds
    from .labeling import normalize_task
    from .streaming import measure_rtf

    task = normalize_task(args.task)
    model = _load(args.ckpt, task)
    val, test, dcfg = _eval_data(args, model, task, args.manipulation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    rtf_audio = None
    for ctx in _contexts(args.context):
        thr = tune_thresholds([o.bc_probs for o in predict_dataset(model, val, ctx)], val, task)
        rep = evaluate_run(model, test, task, thr, ctx, args.mode, args.method or model.cfg.arch)
        if args.rtf:
            if rtf_audio is None:
                rtf_audio = _rtf_audio(args.data, args.rtf_seconds)
            rep.rtf = measure_rtf(model, rtf_audio, ctx).rtf
        reports.append(rep)
        logger.info("context %s: %s", ctx, {k: round(v.f1, 4) for k, v in rep.metrics.items()})
    records = out / "report.jsonl"
    with open(records, "w", encoding="utf-8") as f:
        for rep in reports:
            for rec in rep.to_records():
                f.write(json.dumps(rec) + "\n")
    table = format_table(reports)
    if args.rtf:
        table += "\n\n" + "\n".join(f"context {r.context if r.context is not None else 'full'}: RTF {r.rtf:.3f}"
                                    for r in reports)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    write_manifest(out / "run_manifest.json", "eval", argv,
                   {"task": task, "manipulation": args.manipulation, "context": args.context, "mode": args.mode,
                    "model": model.cfg.to_dict(), "data": _data_dict(dcfg)},
                   {}, [args.ckpt, args.data, args.config], [records, out / "table.txt"])


def _rtf_audio(data_root, seconds: float):
    """First test-split session, truncated to ``seconds``."""
    from .audio import read_wav_stereo
    from .labeling import read_manifest

    manifest = read_manifest(data_root)
    name = sorted(n for n, s in manifest.items() if s == "test")[0]
    audio = read_wav_stereo(Path(data_root) / name / "audio.wav")
    return audio.crop(0.0, min(audio.duration, seconds))


def cmd_zeroshot(args, argv) -> None:
    from .evaluation import evaluate_zero_shot, format_table, predict_dataset

    model = _load(args.ckpt)
    val, test, dcfg = _eval_data(args, model, "binary", args.manipulation)
    ctx = _contexts([args.context])[0]
    rep = evaluate_zero_shot(predict_dataset(model, val, ctx), val, predict_dataset(model, test, ctx), test,
                             dcfg.listener, ctx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "report.jsonl")
    table = format_table([rep])
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    write_manifest(out / "run_manifest.json", "zeroshot", argv, {"context": ctx, "model": model.cfg.to_dict()},
                   {}, [args.ckpt, args.data], [out / "report.jsonl", out / "table.txt"])


def cmd_rtf(args, argv) -> None:
    from .audio import read_wav_stereo
    from .streaming import measure_rtf

    model = _load(args.ckpt)
    audio = read_wav_stereo(args.audio)
    results = []
    for ctx in _contexts(args.context):
        runs = [measure_rtf(model, audio, ctx, args.frame_rate) for _ in range(args.repeats)]
        runs.sort(key=lambda r: r.rtf)
        med = runs[len(runs) // 2]
        results.append(asdict(med) | {"runs": [r.rtf for r in runs]})
        print(f"context {ctx}: RTF {med.rtf:.3f}  p50 {med.latency_p50_ms:.1f} ms  p95 {med.latency_p95_ms:.1f} ms",
              file=sys.stderr)
    text = json.dumps(results, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(_manifest_for(args.out), "rtf", argv, {"context": args.context, "repeats": args.repeats},
                       {}, [args.ckpt, args.audio], [args.out])
    else:
        print(text)


def cmd_stream(args, argv) -> None:
    from .errors import ConfigMismatch
    from .streaming import serve

    model = _load(args.ckpt, args.task)
    if args.frame_rate is not None and args.frame_rate != model.cfg.frame_rate:
        raise ConfigMismatch(f"checkpoint runs at {model.cfg.frame_rate} Hz, not {args.frame_rate} Hz")
    if args.port is None and not args.stdio:
        raise UsageError("stream: give --port or --stdio")
    serve(model, args.port, args.stdio, args.task, _contexts([args.context])[0])


# -- parser -------------------------------------------------------------------

def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-channel", dest="d_channel", type=int)
    g.add_argument("--n-heads", dest="n_heads", type=int)
    g.add_argument("--frame-rate", dest="frame_rate", type=int, choices=(10, 50))
    g.add_argument("--max-context", dest="max_context", type=int)
    g.add_argument("--encoder", choices=("reference", "external"))
    g.add_argument("--n-mels", dest="n_mels", type=int)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    for name, typ in (("alpha", float), ("beta", float), ("gamma", float), ("positive-weight", float),
                      ("lr", float), ("batch-frames", int), ("batch-size", int), ("max-steps", int),
                      ("val-interval", int), ("patience", int), ("seed", int)):
        g.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    p.add_argument("--log", help="training log (JSON lines); default <out>.log.jsonl")
    p.add_argument("--interior", choices=("mask", "negative"), help="frames inside backchannels")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vapbc", description="Backchannel prediction on a voice activity projection model.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="stage 1: projection + VAD training")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    _add_model_flags(s)
    _add_train_flags(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="stage 2: backchannel fine-tuning")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    s.add_argument("--method", choices=("baseline", "st_no_pt", "st_pt", "mt_pt"))
    s.add_argument("--task", choices=("timing", "binary", "type"))
    s.add_argument("--pretrained", help="pre-trained checkpoint (st_pt, mt_pt)")
    _add_model_flags(s)
    _add_train_flags(s)
    s.set_defaults(func=cmd_finetune)

    def eval_common(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--config")
        s.add_argument("--manipulation", default="none", choices=("none", "intensity-flat", "pitch-flat"))
        s.add_argument("--manipulated-root", dest="manipulated_root")
        s.add_argument("--interior", choices=("mask", "negative"))

    s = sub.add_parser("eval", help="frame-wise test scores, optionally over several contexts")
    eval_common(s)
    s.add_argument("--task", default="timing", choices=("timing", "binary", "type"))
    s.add_argument("--context", nargs="+", default=["5"], help="seconds, or 'full'")
    s.add_argument("--mode", choices=("argmax", "threshold"))
    s.add_argument("--method", help="label for the report")
    s.add_argument("--rtf", action="store_true", help="also measure streaming RTF per context")
    s.add_argument("--rtf-seconds", dest="rtf_seconds", type=float, default=60.0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("zeroshot", help="score the projection-derived backchannel estimate")
    eval_common(s)
    s.add_argument("--context", default="full")
    s.set_defaults(func=cmd_zeroshot)

    s = sub.add_parser("rtf", help="streaming real-time factor on one file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--context", nargs="+", default=["5"])
    s.add_argument("--frame-rate", dest="frame_rate", type=int)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rtf)

    s = sub.add_parser("stream", help="serve predictions over TCP or stdio")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--context", default="5")
    s.add_argument("--frame-rate", dest="frame_rate", type=int)
    s.add_argument("--task", choices=("timing", "binary", "type"))
    g = s.add_mutually_exclusive_group()
    g.add_argument("--port", type=int)
    g.add_argument("--stdio", action="store_true")
    s.set_defaults(func=cmd_stream)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except BindError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (VapError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
