"""Frame-wise scoring on unbalanced label streams.

Masked frames (``bc_mask == False``) never enter any count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import LengthMismatch, MissingThreshold
from .labeling import CLASS_NAMES, Dataset, FrameLabels, normalize_task, positive_rate, task_classes

DEFAULT_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass
class PRF:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "PRF":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(f, p, r, int(tp), int(fp), int(fn), int(tn))


def _tracks(labels):
    if isinstance(labels, FrameLabels):
        return np.asarray(labels.bc_class), np.asarray(labels.bc_mask, dtype=bool)
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], FrameLabels):
        return (np.concatenate([l.bc_class for l in labels]),
                np.concatenate([l.bc_mask for l in labels]).astype(bool))
    cls = np.asarray(labels)
    return cls, np.ones(cls.shape, dtype=bool)


def frame_metrics(pred, labels, positive_class: int = 1) -> PRF:
    """One-vs-rest confusion counts for ``positive_class`` over scored frames."""
    pred = np.asarray(pred)
    cls, mask = _tracks(labels)
    if pred.shape != cls.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions for {cls.shape[0]} labelled frames")
    yp = pred[mask] == positive_class
    yt = cls[mask] == positive_class
    tp = int(np.sum(yp & yt))
    fp = int(np.sum(yp & ~yt))
    fn = int(np.sum(~yp & yt))
    tn = int(np.sum(~yp & ~yt))
    return PRF.from_counts(tp, fp, fn, tn)


def always_positive(labels, positive_class: int = 1) -> PRF:
    cls, _ = _tracks(labels)
    return frame_metrics(np.full(cls.shape, positive_class), labels, positive_class)


def sweep_threshold(probs, labels, grid=None, positive_class: int = 1) -> tuple[float, PRF]:
    """Threshold maximising F1 (frames with prob >= threshold are positive).

    Ties go to the lowest threshold. When no threshold reaches F1 > 0 the
    highest threshold is returned, i.e. the rule closest to predicting nothing.
    """
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    cls, mask = _tracks(labels)
    if probs.shape != cls.shape:
        raise LengthMismatch(f"{probs.shape[0]} scores for {cls.shape[0]} labelled frames")
    p = probs[mask]
    yt = cls[mask] == positive_class
    # Counts for every threshold at once: sort scores, binary-search the grid.
    order = np.argsort(p, kind="stable")
    ps, ys = p[order], yt[order]
    pos_above = np.concatenate([np.cumsum(ys[::-1])[::-1], [0]])
    first = np.searchsorted(ps, grid, side="left")
    n_pred = len(ps) - first
    tp = pos_above[first]
    fp = n_pred - tp
    fn = int(yt.sum()) - tp
    tn = len(ps) - n_pred - fn
    results = [PRF.from_counts(*c) for c in zip(tp, fp, fn, tn)]
    f1 = np.array([r.f1 for r in results])
    best = int(np.argmax(f1)) if f1.max() > 0 else len(grid) - 1
    return float(grid[best]), results[best]


def decide_classes(probs, task: str, thresholds=None, mode: str = "argmax") -> np.ndarray:
    """Per-frame class decisions from class probabilities (T, C).

    binary: class 1 iff p1 >= thresholds[1]. type: argmax with the lowest
    index winning ties, or ``mode="threshold"``: classes whose probability
    clears their own threshold compete by probability, otherwise class 0.
    """
    task = normalize_task(task)
    probs = _probs_of(probs)
    thresholds = _as_threshold_map(thresholds)
    if task == "binary":
        if thresholds is None or 1 not in thresholds:
            raise MissingThreshold("binary decisions need a validation-tuned threshold")
        return (probs[:, 1] >= thresholds[1]).astype(np.int64)
    if mode == "argmax":
        return np.argmax(probs, axis=1).astype(np.int64)
    if mode != "threshold":
        raise ValueError(f"unknown decision mode {mode!r}")
    if thresholds is None or any(c not in thresholds for c in range(1, probs.shape[1])):
        raise MissingThreshold("threshold mode needs a threshold for every backchannel class")
    thr = np.array([thresholds[c] for c in range(1, probs.shape[1])])
    passing = np.where(probs[:, 1:] >= thr, probs[:, 1:], -np.inf)
    best = np.argmax(passing, axis=1) + 1
    return np.where(np.isfinite(passing.max(axis=1)), best, 0).astype(np.int64)


def _probs_of(x) -> np.ndarray:
    if hasattr(x, "bc_probs"):
        x = x.bc_probs
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1])


def _as_threshold_map(thresholds):
    if thresholds is None:
        return None
    if isinstance(thresholds, (int, float)):
        return {1: float(thresholds)}
    return {int(k): float(v) for k, v in thresholds.items()}


@dataclass
class EvalReport:
    """Scores for one model/condition; rows are keyed by class name."""

    task: str
    method: str = ""
    manipulation: str = "none"
    context: float | None = None
    decision: str = "threshold"
    thresholds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)        # class name -> PRF
    random: dict = field(default_factory=dict)         # class name -> PRF of always-positive
    positive_rate: dict = field(default_factory=dict)  # class name -> rate
    rtf: float | None = None

    def f1(self, name: str) -> float:
        return self.metrics[name].f1

    def to_records(self) -> list[dict]:
        recs = []
        for name, prf in self.metrics.items():
            recs.append({
                "task": self.task, "method": self.method, "manipulation": self.manipulation,
                "context": self.context, "decision": self.decision, "class": name,
                "threshold": self.thresholds.get(name), "positive_rate": self.positive_rate.get(name),
                "random_f1": self.random[name].f1 if name in self.random else None,
                "rtf": self.rtf, **asdict(prf),
            })
        return recs

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec) + "\n")


def _class_names(task: str) -> list[str]:
    return ["backchannel"] if task == "binary" else [CLASS_NAMES[c] for c in range(1, 3)]


def _class_ids(task: str) -> list[int]:
    return list(range(1, task_classes(task)))


def build_report(probs_per_session, dataset: Dataset, task: str, thresholds=None, mode: str | None = None,
                 method: str = "", context: float | None = None) -> EvalReport:
    """Score class probabilities for every session of ``dataset``."""
    task = normalize_task(task)
    mode = mode or ("threshold" if task == "binary" else "argmax")
    preds = np.concatenate([decide_classes(p, task, thresholds, mode) for p in probs_per_session])
    labels = dataset.labels
    report = EvalReport(task, method, dataset.manipulation, context, mode)
    tmap = _as_threshold_map(thresholds) or {}
    for c, name in zip(_class_ids(task), _class_names(task)):
        report.metrics[name] = frame_metrics(preds, labels, c)
        report.random[name] = always_positive(labels, c)
        report.positive_rate[name] = positive_rate(labels, c)
        if c in tmap:
            report.thresholds[name] = tmap[c]
    return report


def tune_thresholds(probs_per_session, dataset: Dataset, task: str, grid=None) -> dict[int, float]:
    """Per-class one-vs-rest thresholds maximising F1 on a validation split."""
    task = normalize_task(task)
    labels = dataset.labels
    probs = np.concatenate([_probs_of(p) for p in probs_per_session])
    if task == "binary":
        return {1: sweep_threshold(probs[:, 1], labels, grid, 1)[0]}
    return {c: sweep_threshold(probs[:, c], labels, grid, c)[0] for c in _class_ids(task)}


def predict_dataset(model, dataset: Dataset, context: float | None = None, batch_windows: int = 256):
    """ModelOutputs for every session, with the Transformer context limited
    to ``context`` seconds (None = whole session)."""
    from .model import run_session

    return [run_session(model, s, context, batch_windows=batch_windows) for s in dataset]


def evaluate_run(model, dataset: Dataset, task: str, thresholds=None, context: float | None = 5.0,
                 mode: str | None = None, method: str = "", outputs=None) -> EvalReport:
    """Evaluate ``model`` on ``dataset`` (whose manipulation is already applied).

    ``thresholds`` should come from the unmanipulated validation split via
    :func:`tune_thresholds`.
    """
    task = normalize_task(task)
    if outputs is None:
        outputs = predict_dataset(model, dataset, context)
    return build_report([o.bc_probs for o in outputs], dataset, task, thresholds, mode, method, context)


def evaluate_zero_shot(val_outputs, val: Dataset, test_outputs, test: Dataset, listener: int = 1,
                       context: float | None = None, grid=None) -> EvalReport:
    """Binary report for the projection-derived score with a validation-tuned threshold."""
    from .state_codec import zero_shot_bc_score

    def scores(outputs):
        return [zero_shot_bc_score(o.vap_probs.detach().cpu().numpy().reshape(-1, 256), listener)
                for o in outputs]

    thr, _ = sweep_threshold(np.concatenate(scores(val_outputs)), val.labels, grid)
    as_probs = [np.stack([1 - s, s], axis=1) for s in scores(test_outputs)]
    return build_report(as_probs, test, "binary", {1: thr}, "threshold", "zero-shot", context)


def format_table(reports: list[EvalReport], reference: EvalReport | None = None) -> str:
    """Plain-text table of F1/precision/recall in percent.

    With ``reference``, F1 is followed by its signed change, e.g. ``35.48 (-2.63)``.
    """
    lines = []
    header = f"{'method':<14}{'manipulation':<16}{'context':>8}  {'class':<12}{'F1':>16}{'Prec':>8}{'Rec':>8}{'p':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for rep in reports:
        for name, prf in rep.metrics.items():
            f1 = f"{100 * prf.f1:.2f}"
            if reference is not None and rep is not reference and name in reference.metrics:
                f1 += f" ({100 * (prf.f1 - reference.metrics[name].f1):+.2f})"
            ctx = "-" if rep.context is None else f"{rep.context:g}"
            lines.append(f"{rep.method:<14}{rep.manipulation:<16}{ctx:>8}  {name:<12}{f1:>16}"
                         f"{100 * prf.precision:>8.2f}{100 * prf.recall:>8.2f}{100 * rep.positive_rate.get(name, 0):>7.2f}")
    return "\n".join(lines)


def random_row_f1(p: float) -> float:
    """F1 of the always-positive classifier at positive rate ``p``."""
    return 2 * p / (1 + p)
