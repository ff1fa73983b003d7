"""Deterministic synthetic attentive-listening dialogues.

The speaker channel is a sequence of harmonic-tone "utterances" with F0
contours and syllable-rate amplitude envelopes. Backchannels on the listener
channel follow two cues:

* continuer: the utterance ends with a falling F0 and is followed by a long pause;
* assessment: the last stretch of the utterance is markedly louder
  (an intensity peak) and is followed by a long pause.

Either way the backchannel starts 300-700 ms after the utterance ends. Other
utterances end with a flat or rising F0 and are mostly followed by a short
pause. Annotations are exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, StereoAudio, quantize_pcm16, write_wav_stereo
from .errors import InvalidConfig
from .labeling import BcEvent, write_records

logger = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    seed: int = 0
    session_duration: float = 480.0
    sessions: dict = field(default_factory=lambda: {"train": 40, "val": 5, "test": 5})
    f0_range: tuple = (100.0, 220.0)
    utterance_length: tuple = (1.0, 3.0)
    continuer_rate: float = 0.45   # share of utterances ending in a continuer cue
    assessment_rate: float = 0.15  # share ending in an intensity-peak cue
    other_rate: float = 0.0        # share followed by an unclassifiable backchannel
    cue_delay: tuple = (0.3, 0.7)
    bc_length: tuple = (0.2, 0.4)
    long_pause: tuple = (1.1, 1.8)
    short_pause: tuple = (0.2, 0.5)
    uncued_long_pause_rate: float = 0.2
    level: tuple = (0.04, 0.09)
    peak_gain: float = 3.0
    peak_length: float = 0.35
    fall_length: float = 0.4
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.f0_range = tuple(self.f0_range)
        for name in ("utterance_length", "cue_delay", "bc_length", "long_pause", "short_pause", "level"):
            setattr(self, name, tuple(getattr(self, name)))
        problems = []
        rates = (self.continuer_rate, self.assessment_rate, self.other_rate)
        if min(rates) < 0 or sum(rates) > 1:
            problems.append("cue rates must be non-negative and sum to at most 1")
        if self.cue_delay[0] <= 0:
            problems.append("cue -> backchannel delay must be positive")
        if self.cue_delay[1] + self.bc_length[1] > self.long_pause[0]:
            problems.append("backchannels must fit inside the pause after their cue")
        for name in ("f0_range", "utterance_length", "cue_delay", "bc_length", "long_pause", "short_pause", "level"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                problems.append(f"{name} must satisfy 0 < low <= high")
        if self.session_duration < 10:
            problems.append("sessions must last at least 10 s")
        if any(n < 0 for n in self.sessions.values()) or set(self.sessions) - {"train", "val", "test"}:
            problems.append("sessions must map train/val/test to non-negative counts")
        if self.sample_rate != SAMPLE_RATE:
            problems.append(f"sample rate is fixed at {SAMPLE_RATE}")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    start: float
    end: float
    ending: str  # continuer | assessment | other | flat | rise
    pause: float


@dataclass
class Dialogue:
    audio: StereoAudio
    events: list
    vad: list          # per-channel lists of (start, end)
    utterances: list


def _ramp_envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = edge
        env[n - r :] = edge[::-1]
    return env


def _harmonic(f0: np.ndarray, sr: int, max_harmonics: int = 12, top: float = 3800.0) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_h = max(1, min(max_harmonics, int(top // f0.max())))
    amps = 1.0 / np.arange(1, n_h + 1)
    x = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(amps))
    return x / np.sqrt(np.sum(amps**2) / 2)


def _speaker_utterance(rng, cfg: SynthConfig, n: int, ending: str) -> np.ndarray:
    sr = cfg.sample_rate
    t = np.arange(n) / sr
    base = rng.uniform(*cfg.f0_range)
    f0 = base * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.4, 0.9) * t + rng.uniform(0, 2 * np.pi)))
    k = min(n, int(cfg.fall_length * sr))
    tail = np.linspace(0.0, 1.0, k)
    if ending == "continuer":
        f0[n - k :] *= 1.0 - 0.35 * tail
    elif ending == "rise":
        f0[n - k :] *= 1.0 + 0.3 * tail
    level = rng.uniform(*cfg.level)
    syl = rng.uniform(3.5, 5.0)
    env = level * (0.55 + 0.45 * np.abs(np.sin(np.pi * syl * t + rng.uniform(0, np.pi))))
    if ending == "assessment":
        p = min(n, int(cfg.peak_length * sr))
        rise = min(p, int(0.03 * sr))
        gain = np.full(p, cfg.peak_gain)
        gain[:rise] = np.linspace(1.0, cfg.peak_gain, rise)
        env[n - p :] *= gain
    return _harmonic(f0, sr) * env * _ramp_envelope(n, int(0.02 * sr))


def _backchannel(rng, cfg: SynthConfig, n: int, kind: str) -> np.ndarray:
    sr = cfg.sample_rate
    if kind == "assessment":
        f0 = rng.uniform(220, 280) * np.linspace(1.0, 1.2, n)
        amp = 0.1
    else:
        f0 = rng.uniform(150, 190) * np.linspace(1.0, 0.95, n)
        amp = 0.08
    return amp * _harmonic(f0, sr, max_harmonics=3) * _ramp_envelope(n, int(0.015 * sr))


def generate_dialogue(cfg: SynthConfig, session_seed) -> Dialogue:
    """One session: stereo audio (PCM16-exact samples), backchannel events and VAD segments."""
    rng = np.random.default_rng(session_seed)
    sr = cfg.sample_rate
    total = int(round(cfg.session_duration * sr))
    x = np.zeros((2, total))
    events, vad, utts = [], [[], []], []
    cue_p = np.array([cfg.continuer_rate, cfg.assessment_rate, cfg.other_rate])
    kinds = ("continuer", "assessment", "other", "none")
    probs = np.append(cue_p, 1.0 - cue_p.sum())
    t = rng.uniform(0.3, 1.0)
    while True:
        dur = rng.uniform(*cfg.utterance_length)
        if t + dur + cfg.long_pause[1] + 0.5 > cfg.session_duration:
            break
        kind = kinds[rng.choice(4, p=probs)]
        if kind == "none":
            ending = "rise" if rng.random() < 0.5 else "flat"
        else:
            ending = "flat" if kind == "other" else kind
        a = int(round(t * sr))
        b = a + int(round(dur * sr))
        x[0, a:b] = _speaker_utterance(rng, cfg, b - a, ending)
        start, end = a / sr, b / sr
        vad[0].append((start, end))
        if kind != "none":
            pause = rng.uniform(*cfg.long_pause)
            on = b + int(round(rng.uniform(*cfg.cue_delay) * sr))
            off = on + int(round(rng.uniform(*cfg.bc_length) * sr))
            x[1, on:off] = _backchannel(rng, cfg, off - on, kind)
            events.append(BcEvent(on / sr, off / sr, 1, kind))
            vad[1].append((on / sr, off / sr))
        elif rng.random() < cfg.uncued_long_pause_rate:
            pause = rng.uniform(*cfg.long_pause)
        else:
            pause = rng.uniform(*cfg.short_pause)
        utts.append(Utterance(start, end, ending if kind == "none" else kind, pause))
        t = end + pause
    audio = StereoAudio(quantize_pcm16(np.clip(x, -0.999, 0.999)), sr)
    return Dialogue(audio, events, vad, utts)


def session_seed(cfg: SynthConfig, index: int) -> list[int]:
    return [cfg.seed, index]


def split_assignment(cfg: SynthConfig) -> dict[str, str]:
    """Session name -> split, randomly permuted but fixed by the corpus seed."""
    order = [s for s in ("train", "val", "test") for _ in range(cfg.sessions.get(s, 0))]
    perm = np.random.default_rng([cfg.seed, 2**31 - 1]).permutation(len(order))
    return {f"s{i:03d}": order[j] for i, j in enumerate(perm)}


def write_session(sdir: Path, dlg: Dialogue) -> None:
    sdir.mkdir(parents=True, exist_ok=True)
    write_wav_stereo(sdir / "audio.wav", dlg.audio, "pcm16")
    write_records(sdir / "bc.jsonl", (e.to_record() for e in dlg.events))
    write_records(sdir / "vad.jsonl", ({"channel": c, "start": s, "end": e}
                                       for c in (0, 1) for s, e in dlg.vad[c]))


def generate_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write ``<out>/<session>/{audio.wav,bc.jsonl,vad.jsonl}``, manifest and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = split_assignment(cfg)
    counts = {"continuer": 0, "assessment": 0, "other": 0}
    per_split = {s: 0 for s in ("train", "val", "test")}
    for i, (name, split) in enumerate(sorted(manifest.items())):
        dlg = generate_dialogue(cfg, session_seed(cfg, i))
        write_session(out / name, dlg)
        for e in dlg.events:
            counts[e.kind] += 1
        per_split[split] += 1
        logger.info("wrote %s (%s, %d events)", name, split, len(dlg.events))
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    summary = {
        "sessions": len(manifest),
        "splits": per_split,
        "events": counts,
        "continuer_to_assessment": counts["continuer"] / counts["assessment"] if counts["assessment"] else None,
        "hours": len(manifest) * cfg.session_duration / 3600,
        "config": cfg.to_dict(),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return summary


def corpus_digest(root) -> str:
    """SHA-256 over every file's relative path and bytes."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(os.fspath(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
