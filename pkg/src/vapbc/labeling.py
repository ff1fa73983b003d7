"""Per-frame supervision: VAD bits, projection targets and backchannel classes.

Frame t stands for time t / frame_rate and covers [t, t+1) / frame_rate.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, StereoAudio, flatten_intensity, frame_hop, log_mel, read_wav_stereo
from .errors import InvalidConfig, MissingAudio, MissingManifest, MissingManipulatedAudio, NegativeTime, OverlapError, ParseError
from .state_codec import DEFAULT_GRID, BinGrid, vap_states

logger = logging.getLogger(__name__)

KINDS = ("continuer", "assessment", "other")
NON_BC, CONTINUER, ASSESSMENT = 0, 1, 2
CLASS_NAMES = {NON_BC: "non_bc", CONTINUER: "continuer", ASSESSMENT: "assessment"}
SPLITS = ("train", "val", "test")
MANIPULATIONS = ("none", "intensity-flat", "pitch-flat")
_EPS = 1e-9


def normalize_task(task: str) -> str:
    """Map the CLI spelling ``timing`` onto ``binary``."""
    if task in ("binary", "timing"):
        return "binary"
    if task == "type":
        return "type"
    raise ValueError(f"unknown task {task!r}; expected binary/timing or type")


def task_classes(task: str) -> int:
    return 2 if normalize_task(task) == "binary" else 3


@dataclass(frozen=True)
class BcEvent:
    onset: float
    offset: float
    channel: int
    kind: str

    def __post_init__(self):
        if self.onset < 0 or self.offset <= self.onset:
            raise NegativeTime(f"invalid backchannel interval [{self.onset}, {self.offset})")
        if self.channel not in (0, 1):
            raise ValueError(f"channel must be 0 or 1, got {self.channel}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown backchannel kind {self.kind!r}")

    def to_record(self) -> dict:
        return {"onset": self.onset, "offset": self.offset, "channel": self.channel, "kind": self.kind}


@dataclass
class FrameLabels:
    vad: np.ndarray        # (T, 2) bool
    vap_state: np.ndarray  # (T,) int64
    bc_class: np.ndarray   # (T,) int64
    bc_mask: np.ndarray    # (T,) bool, True = scored

    def __post_init__(self):
        T = len(self.vap_state)
        if not (self.vad.shape == (T, 2) and len(self.bc_class) == T and len(self.bc_mask) == T):
            raise ValueError("label tracks have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.vap_state)

    def crop(self, start: int, stop: int) -> "FrameLabels":
        return FrameLabels(self.vad[start:stop], self.vap_state[start:stop],
                           self.bc_class[start:stop], self.bc_mask[start:stop])


def n_frames(duration: float, frame_rate: float) -> int:
    return int(math.floor(duration * frame_rate + _EPS))


def _frame_span(start: float, end: float, frame_rate: float, T: int) -> tuple[int, int]:
    """Frames whose time t/frame_rate lies in [start, end), clipped to [0, T)."""
    lo = math.ceil(start * frame_rate - _EPS)
    hi = math.ceil(end * frame_rate - _EPS)
    return min(max(lo, 0), T), min(max(hi, 0), T)


def _check_overlaps(intervals, what: str):
    for (a0, a1), (b0, b1) in zip(intervals, intervals[1:]):
        if b0 < a1:
            raise OverlapError(f"overlapping {what}: [{a0}, {a1}) and [{b0}, {b1})")


def parse_events(lines, source: str = "<records>") -> list[BcEvent]:
    events = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            onset, offset = float(rec["onset"]), float(rec["offset"])
            channel, kind = int(rec["channel"]), str(rec["kind"])
        except (ValueError, KeyError, TypeError) as e:
            raise ParseError(f"{source}:{n}: {e}") from e
        try:
            events.append(BcEvent(onset, offset, channel, kind))
        except NegativeTime as e:
            raise NegativeTime(f"{source}:{n}: {e}") from e
        except ValueError as e:
            raise ParseError(f"{source}:{n}: {e}") from e
    events.sort(key=lambda e: (e.onset, e.channel))
    for c in (0, 1):
        _check_overlaps([(e.onset, e.offset) for e in events if e.channel == c], f"events on channel {c}")
    return events


def load_annotations(path) -> list[BcEvent]:
    """Read line-delimited {onset, offset, channel, kind} records, sorted by onset."""
    with open(path, encoding="utf-8") as f:
        return parse_events(f, os.fspath(path))


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def load_vad_segments(path) -> list[list[tuple[float, float]]]:
    """Read {channel, start, end} records into per-channel interval lists."""
    segments: list[list[tuple[float, float]]] = [[], []]
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                c, s, e = int(rec["channel"]), float(rec["start"]), float(rec["end"])
            except (ValueError, KeyError, TypeError) as err:
                raise ParseError(f"{path}:{n}: {err}") from err
            if c not in (0, 1):
                raise ParseError(f"{path}:{n}: channel must be 0 or 1")
            if s < 0 or e < s:
                raise NegativeTime(f"{path}:{n}: invalid segment [{s}, {e})")
            segments[c].append((s, e))
    return [sorted(seg) for seg in segments]


def make_bc_labels(events, duration: float, frame_rate: float, lead: float = 0.5,
                   task: str = "binary", listener: int = 1, interior: str = "mask"):
    """Backchannel class and mask tracks.

    Frames in [onset - lead, onset) take the event's class (later events win
    where lead windows overlap). Frames inside an utterance [onset, offset)
    that are not part of a later lead window are masked, or left negative
    with ``interior="negative"``. In the type task, ``other`` events only mask.
    """
    task = normalize_task(task)
    if lead <= 0:
        raise ValueError("lead must be positive")
    if interior not in ("mask", "negative"):
        raise ValueError(f"interior must be 'mask' or 'negative', got {interior!r}")
    T = n_frames(duration, frame_rate)
    cls = np.zeros(T, dtype=np.int64)
    mask = np.ones(T, dtype=bool)
    mine = sorted((e for e in events if e.channel == listener), key=lambda e: e.onset)
    for e in mine:
        a, b = _frame_span(e.onset - lead, e.onset, frame_rate, T)
        if task == "binary":
            cls[a:b], mask[a:b] = 1, True
        elif e.kind == "other":
            cls[a:b], mask[a:b] = NON_BC, False
        else:
            cls[a:b], mask[a:b] = KINDS.index(e.kind) + 1, True
    for e in mine:
        a, b = _frame_span(e.onset, e.offset, frame_rate, T)
        if interior == "mask" or (task == "type" and e.kind == "other"):
            mask[a:b] &= cls[a:b] != NON_BC
    return cls, mask


def make_vad_labels(segments, duration: float, frame_rate: float) -> np.ndarray:
    """(T, 2) activity; frame t is active iff its midpoint falls in an interval."""
    T = n_frames(duration, frame_rate)
    vad = np.zeros((T, 2), dtype=bool)
    mid = (np.arange(T) + 0.5) / frame_rate
    for c, segs in enumerate(segments):
        segs = sorted(segs)
        _check_overlaps(segs, f"VAD segments on channel {c}")
        for s, e in segs:
            vad[:, c] |= (mid >= s) & (mid < e)
    return vad


def make_vap_targets(vad, frame_rate: float, grid: BinGrid = DEFAULT_GRID) -> np.ndarray:
    return vap_states(vad, frame_rate, grid)


def make_frame_labels(events, segments, duration: float, frame_rate: float, task: str = "binary",
                      lead: float = 0.5, listener: int = 1, grid: BinGrid = DEFAULT_GRID,
                      interior: str = "mask") -> FrameLabels:
    vad = make_vad_labels(segments, duration, frame_rate)
    cls, mask = make_bc_labels(events, duration, frame_rate, lead, task, listener, interior)
    return FrameLabels(vad, make_vap_targets(vad, frame_rate, grid), cls, mask)


def positive_rate(labels: FrameLabels | list, cls: int = 1) -> float:
    """Share of scored frames labelled ``cls``; the one rate used everywhere."""
    if isinstance(labels, FrameLabels):
        labels = [labels]
    scored = sum(int(l.bc_mask.sum()) for l in labels)
    hits = sum(int(((l.bc_class == cls) & l.bc_mask).sum()) for l in labels)
    return hits / scored if scored else 0.0


@dataclass
class DatasetConfig:
    frame_rate: int = 10
    lead: float = 0.5
    listener: int = 1
    n_mels: int = 40
    interior: str = "mask"
    features: str = "mel"  # or "external": <session>/feats{0,1}.bin
    grid: BinGrid = DEFAULT_GRID

    def __post_init__(self):
        if isinstance(self.grid, dict):
            try:
                self.grid = BinGrid(tuple(self.grid.get("boundaries_ms", DEFAULT_GRID.boundaries_ms)),
                                    self.grid.get("activity_threshold", DEFAULT_GRID.activity_threshold))
            except ValueError as e:
                raise InvalidConfig(str(e)) from None
        if self.interior not in ("mask", "negative"):
            raise InvalidConfig("interior must be 'mask' or 'negative'")
        if self.features not in ("mel", "external"):
            raise InvalidConfig("features must be 'mel' or 'external'")
        if self.lead <= 0 or self.listener not in (0, 1) or self.frame_rate not in (10, 50):
            raise InvalidConfig("need lead > 0, listener in {0, 1} and frame rate 10 or 50 Hz")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SessionData:
    name: str
    labels: FrameLabels
    events: list
    duration: float
    mel: np.ndarray | None = None        # (2, T_mel, n_mels) at 50 Hz
    features: np.ndarray | None = None   # (2, T, D) external features

    @property
    def n_frames(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    split: str
    task: str
    config: DatasetConfig
    manipulation: str = "none"
    sessions: list = field(default_factory=list)

    def __len__(self):
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    def __getitem__(self, i):
        return self.sessions[i]

    @property
    def labels(self) -> list[FrameLabels]:
        return [s.labels for s in self.sessions]

    def stats(self) -> dict:
        classes = range(1, task_classes(self.task))
        out = {
            "sessions": len(self.sessions),
            "frames": sum(s.n_frames for s in self.sessions),
            "scored_frames": sum(int(s.labels.bc_mask.sum()) for s in self.sessions),
        }
        for c in classes:
            name = "positive" if self.task == "binary" else CLASS_NAMES[c]
            out[f"{name}_frames"] = sum(int(((s.labels.bc_class == c) & s.labels.bc_mask).sum()) for s in self.sessions)
            out[f"{name}_rate"] = positive_rate(self.labels, c)
        return out


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise MissingManifest(f"no manifest.json under {root}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    if not isinstance(manifest, dict):
        raise ParseError(f"{path}: expected a mapping of session to split")
    return manifest


def read_feature_file(path):
    from .model import read_feature_file as _read  # keeps torch out of the import path

    return _read(path)


def session_features(audio: StereoAudio, n_mels: int) -> np.ndarray:
    """50 Hz log-mel for both channels, shape (2, T_mel, n_mels)."""
    return np.stack([log_mel(audio.channel(c), audio.sample_rate, 50, n_mels).frames for c in (0, 1)])


def assemble_dataset(root, split: str, task: str = "binary", config: DatasetConfig | None = None,
                     manipulation: str = "none", manipulated_root=None) -> Dataset:
    """Load one split of a corpus directory with labels and input features.

    ``manipulation`` is applied to the speaker channel: ``intensity-flat``
    is computed here, ``pitch-flat`` reads ``<manipulated_root>/<session>/audio.wav``.
    """
    config = config or DatasetConfig()
    task = normalize_task(task)
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if manipulation not in MANIPULATIONS:
        raise ValueError(f"manipulation must be one of {MANIPULATIONS}")
    if manipulation == "pitch-flat" and manipulated_root is None:
        raise MissingManipulatedAudio("pitch-flat evaluation needs a directory of manipulated audio")
    root = Path(root)
    manifest = read_manifest(root)
    names = sorted(name for name, s in manifest.items() if s == split)
    ds = Dataset(split, task, config, manipulation)
    speaker = 1 - config.listener
    for name in names:
        sdir = root / name
        wav = sdir / "audio.wav"
        if manipulation == "pitch-flat":
            wav = Path(manipulated_root) / name / "audio.wav"
            if not wav.is_file():
                raise MissingManipulatedAudio(f"missing manipulated audio {wav}")
        if not wav.is_file():
            raise MissingAudio(f"manifest lists {name} but {wav} does not exist")
        events = load_annotations(sdir / "bc.jsonl") if (sdir / "bc.jsonl").exists() else []
        segments = load_vad_segments(sdir / "vad.jsonl") if (sdir / "vad.jsonl").exists() else [[], []]
        mel = feats = None
        if config.features == "external":
            f0, f1 = (read_feature_file(sdir / f"feats{c}.bin") for c in (0, 1))
            feats = np.stack([f0.frames, f1.frames])
            duration = len(f0) / config.frame_rate
        else:
            audio = read_wav_stereo(wav)
            if manipulation == "intensity-flat":
                audio = flatten_intensity(audio, speaker)
            duration = audio.duration
            mel = session_features(audio, config.n_mels)
        labels = make_frame_labels(events, segments, duration, config.frame_rate, task,
                                   config.lead, config.listener, config.grid, config.interior)
        ds.sessions.append(SessionData(name, labels, events, duration, mel, feats))
    if ds.sessions:
        logger.info("%s split: %s", split, ds.stats())
    return ds


def mel_frames_per_model_frame(frame_rate: int) -> int:
    return frame_hop(SAMPLE_RATE, frame_rate) // frame_hop(SAMPLE_RATE, 50)
