"""Pre-training and multi-task fine-tuning.

The fine-tuning objective is ``alpha * l_vap + beta * l_vad + gamma * l_bc``
where ``l_bc`` is a class-weighted cross-entropy over unmasked frames.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointMissing, ConfigMismatch, EmptyCorpus, InvalidConfig, LengthMismatch
from .labeling import Dataset, FrameLabels, normalize_task, task_classes
from .model import ModelConfig, ModelOutput, VAPModel, init_model, load_checkpoint, reset_bc_head, store_checkpoint

logger = logging.getLogger(__name__)

METHODS = ("baseline", "st_no_pt", "st_pt", "mt_pt")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 5.0
    positive_weight: float = 5.0
    stage: str = "finetune"  # "pretrain" | "finetune"
    method: str = "mt_pt"
    task: str = "binary"
    lr: float = 1e-4
    batch_frames: int = 200
    batch_size: int = 8
    max_steps: int = 2000
    val_interval: int = 200
    patience: int = 5
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        self.task = normalize_task(self.task)
        problems = []
        if min(self.alpha, self.beta, self.gamma) < 0:
            problems.append("loss weights must be non-negative")
        if self.positive_weight < 1:
            problems.append("positive_weight must be >= 1")
        if self.stage not in ("pretrain", "finetune"):
            problems.append(f"stage must be pretrain or finetune, not {self.stage!r}")
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}, not {self.method!r}")
        if self.stage == "finetune":
            if self.gamma <= 0:
                problems.append("gamma must be > 0 when fine-tuning (no other signal trains the backchannel head)")
            if self.method in ("st_no_pt", "st_pt", "baseline") and (self.alpha or self.beta):
                problems.append(f"single-task method {self.method} requires alpha = beta = 0")
        if self.batch_frames < 1 or self.batch_size < 1 or self.max_steps < 0 or self.val_interval < 1:
            problems.append("batch sizes and intervals must be positive")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def for_method(cls, method: str, **kw) -> "TrainConfig":
        """Fine-tuning config with the loss weights implied by ``method``."""
        if method not in ("mt_pt",):
            kw.setdefault("alpha", 0.0)
            kw.setdefault("beta", 0.0)
        return cls(stage="finetune", method=method, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabelBatch:
    vad: torch.Tensor    # (B, T, 2) float
    vap: torch.Tensor    # (B, T) long
    bc: torch.Tensor     # (B, T) long
    mask: torch.Tensor   # (B, T) bool

    @classmethod
    def from_labels(cls, labels: list[FrameLabels], dtype=torch.float32) -> "LabelBatch":
        return cls(
            torch.as_tensor(np.stack([l.vad for l in labels]), dtype=dtype),
            torch.as_tensor(np.stack([l.vap_state for l in labels]), dtype=torch.long),
            torch.as_tensor(np.stack([l.bc_class for l in labels]), dtype=torch.long),
            torch.as_tensor(np.stack([l.bc_mask for l in labels]), dtype=torch.bool),
        )


@dataclass
class LossBreakdown:
    l_vap: torch.Tensor
    l_vad: torch.Tensor
    l_bc: torch.Tensor
    total: torch.Tensor
    n_frames: int
    n_bc_frames: int
    all_masked: bool = False

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_vap", "l_vad", "l_bc", "total")}


def compute_loss(outputs: ModelOutput, labels, cfg: TrainConfig) -> LossBreakdown:
    """Weighted sum of projection, VAD and backchannel losses.

    ``l_bc`` weights classes != 0 by ``positive_weight`` and divides by the
    summed weights of unmasked frames. With every frame masked it is 0 and
    ``all_masked`` is set. Pre-training drops the backchannel term.
    """
    if isinstance(labels, FrameLabels):
        labels = [labels]
    if isinstance(labels, list):
        labels = LabelBatch.from_labels(labels, outputs.vad_logits.dtype)
    vap_logits = outputs.vap_logits.reshape(-1, outputs.vap_logits.shape[-1])
    bc_logits = outputs.bc_logits.reshape(-1, outputs.bc_logits.shape[-1])
    vad_logits = outputs.vad_logits.reshape(-1, 2)
    n = vap_logits.shape[0]
    if labels.vap.numel() != n:
        raise LengthMismatch(f"{n} output frames but {labels.vap.numel()} labelled frames")
    l_vap = F.cross_entropy(vap_logits, labels.vap.reshape(-1))
    l_vad = F.binary_cross_entropy_with_logits(vad_logits, labels.vad.reshape(-1, 2).to(vad_logits.dtype))
    mask = labels.mask.reshape(-1)
    n_bc = int(mask.sum())
    pretrain = cfg.stage == "pretrain"
    if pretrain or n_bc == 0:
        l_bc = bc_logits.new_zeros(())
    else:
        weight = torch.ones(bc_logits.shape[-1], dtype=bc_logits.dtype)
        weight[1:] = cfg.positive_weight
        l_bc = F.cross_entropy(bc_logits[mask], labels.bc.reshape(-1)[mask], weight=weight)
    gamma = 0.0 if pretrain else cfg.gamma
    total = cfg.alpha * l_vap + cfg.beta * l_vad + gamma * l_bc
    return LossBreakdown(l_vap, l_vad, l_bc, total, n, n_bc, all_masked=(n_bc == 0 and not pretrain))


# -- batching -------------------------------------------------------------

def _session_input(model: VAPModel, session) -> np.ndarray:
    return session.features if model.cfg.encoder == "external" else session.mel


def window_inputs(model: VAPModel, session, start: int, length: int) -> np.ndarray:
    """Inputs for frames [start, start+length) including encoder left context.

    Returns (2, rows, D). Mel rows before the session start are zeros.
    """
    cfg = model.cfg
    src = _session_input(model, session)
    if cfg.encoder == "external":
        return src[:, start : start + length]
    s, ctx = cfg.mel_stride, cfg.receptive_field - 1
    lo, hi = s * start - ctx, s * (start + length)
    out = np.zeros((2, hi - lo, src.shape[-1]), dtype=np.float32)
    a = max(lo, 0)
    out[:, a - lo :] = src[:, a:hi]
    return out


class WindowSampler:
    """Random fixed-length training windows, reproducible from a seed."""

    def __init__(self, dataset: Dataset, length: int, seed: int):
        self.sessions = [s for s in dataset if s.n_frames > 0]
        if not self.sessions:
            raise EmptyCorpus("training split has no frames")
        self.length = min(length, min(s.n_frames for s in self.sessions))
        self.rng = np.random.default_rng(seed)
        sizes = np.array([s.n_frames for s in self.sessions], dtype=np.float64)
        self.p = sizes / sizes.sum()

    def sample(self, n: int) -> list[tuple[object, int]]:
        idx = self.rng.choice(len(self.sessions), size=n, p=self.p)
        out = []
        for i in idx:
            s = self.sessions[i]
            out.append((s, int(self.rng.integers(0, s.n_frames - self.length + 1))))
        return out


def make_batch(model: VAPModel, items, length: int):
    dtype = next(model.parameters()).dtype
    x = np.stack([window_inputs(model, s, start, length) for s, start in items])
    labels = [s.labels.crop(start, start + length) for s, start in items]
    x = torch.as_tensor(x, dtype=dtype)
    return x[:, 0], x[:, 1], LabelBatch.from_labels(labels, dtype)


def chunked_outputs(model: VAPModel, session, length: int) -> ModelOutput:
    """Whole-session outputs from consecutive causal chunks (fast validation path)."""
    parts = []
    for start in range(0, session.n_frames, length):
        n = min(length, session.n_frames - start)
        x0, x1, _ = make_batch(model, [(session, start)], n)
        parts.append(model(x0, x1, has_context=True))
    return ModelOutput(*(torch.cat([getattr(p, k) for p in parts], dim=1)[0]
                         for k in ("vap_logits", "vad_logits", "bc_logits")))


# -- validation -----------------------------------------------------------

@torch.inference_mode()
def validate(model: VAPModel, val: Dataset, cfg: TrainConfig) -> dict:
    """Validation losses and backchannel F1 on chunked causal passes."""
    from .evaluation import sweep_threshold, frame_metrics, decide_classes

    model.eval()
    outs = [chunked_outputs(model, s, cfg.batch_frames) for s in val]
    labels = val.labels
    losses = [compute_loss(o, l, cfg) for o, l in zip(outs, labels)]
    res = {
        "l_vap": float(np.mean([float(l.l_vap) for l in losses])),
        "l_vad": float(np.mean([float(l.l_vad) for l in losses])),
    }
    if cfg.stage == "finetune":
        probs = torch.cat([o.bc_probs for o in outs]).numpy()
        if cfg.task == "binary":
            res["f1"] = float(sweep_threshold(probs[:, 1], labels)[1].f1)
        else:
            pred = decide_classes(probs, "type")
            f1s = [frame_metrics(pred, labels, c).f1 for c in (1, 2)]
            res["f1"] = float(np.mean(f1s))
            res["f1_continuer"], res["f1_assessment"] = (float(f) for f in f1s)
    model.train()
    return res


# -- loops ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: VAPModel
    history: list = field(default_factory=list)
    best_step: int = 0
    best_metric: float = math.nan


def _fit(model: VAPModel, train: Dataset, val: Dataset | None, cfg: TrainConfig, log_path=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    sampler = WindowSampler(train, cfg.batch_frames, cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    pretrain = cfg.stage == "pretrain"
    higher_better = not pretrain
    best, best_state, best_step, bad = None, copy.deepcopy(model.state_dict()), 0, 0
    history = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    model.train()
    try:
        for step in range(1, cfg.max_steps + 1):
            x0, x1, lb = make_batch(model, sampler.sample(cfg.batch_size), sampler.length)
            out = model(x0, x1, has_context=True)
            loss = compute_loss(out, lb, cfg)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            rec = {"step": step, **loss.floats(), "val_metric": None}
            if step % cfg.val_interval == 0 or step == cfg.max_steps:
                if val is not None and len(val):
                    v = validate(model, val, cfg)
                    metric = v["l_vap"] if pretrain else v["f1"]
                    rec["val_metric"] = metric
                    rec["val"] = v
                    improved = best is None or (metric > best if higher_better else metric < best)
                    if improved:
                        best, best_step, bad = metric, step, 0
                        best_state = copy.deepcopy(model.state_dict())
                    else:
                        bad += 1
                    logger.info("step %d %s val=%s", step, loss.floats(), v)
                else:
                    best_state, best_step = copy.deepcopy(model.state_dict()), step
            history.append(rec)
            if log:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if bad >= cfg.patience:
                logger.info("early stop at step %d (best step %d)", step, best_step)
                break
    finally:
        if log:
            log.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_step, math.nan if best is None else float(best))


def pretrain(model: VAPModel | None, train: Dataset, val: Dataset | None, cfg: TrainConfig,
             model_cfg: ModelConfig | None = None, out_path=None, log_path=None) -> TrainResult:
    """Stage 1: projection + VAD training; keeps the best validation l_vap."""
    if cfg.stage != "pretrain":
        raise InvalidConfig("pretrain needs stage='pretrain'")
    if not len(train):
        raise EmptyCorpus("pre-training corpus is empty")
    model = model or init_model(model_cfg or ModelConfig(), cfg.seed)
    result = _fit(model, train, val, cfg, log_path)
    if out_path:
        store_checkpoint(result.model, out_path, {"stage": "pretrain", "train": asdict(cfg)})
    return result


def prepare_finetune_model(cfg: TrainConfig, model_cfg: ModelConfig | None = None, pretrained=None) -> VAPModel:
    """Initial model for a fine-tuning method, with a fresh backchannel head."""
    classes = task_classes(cfg.task)
    if cfg.method in ("st_pt", "mt_pt"):
        if isinstance(pretrained, VAPModel):
            model = copy.deepcopy(pretrained)
        else:
            if pretrained is None:
                raise CheckpointMissing(f"method {cfg.method} needs a pre-trained checkpoint")
            try:
                model = load_checkpoint(pretrained)
            except FileNotFoundError as e:
                raise CheckpointMissing(str(e)) from e
        if model.cfg.arch != "vap":
            raise ConfigMismatch("pre-trained checkpoint must use the vap architecture")
        if model_cfg is not None and model_cfg.d_channel != model.cfg.d_channel:
            raise ConfigMismatch("pre-trained checkpoint width differs from the requested model config")
        model.float()
        return reset_bc_head(model, classes, cfg.seed)
    base = copy.deepcopy(model_cfg) if model_cfg is not None else ModelConfig()
    base.bc_classes = classes
    if cfg.method == "baseline":
        base.arch = "baseline"
    return init_model(base, cfg.seed)


def finetune(train: Dataset, val: Dataset | None, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
             pretrained=None, out_path=None, log_path=None) -> TrainResult:
    """Stage 2 for one comparative method; model selection by validation F1."""
    if cfg.stage != "finetune":
        raise InvalidConfig("finetune needs stage='finetune'")
    if train.task != cfg.task:
        raise ConfigMismatch(f"dataset was labelled for task {train.task}, config asks for {cfg.task}")
    if not len(train):
        raise EmptyCorpus("fine-tuning corpus is empty")
    model = prepare_finetune_model(cfg, model_cfg, pretrained)
    result = _fit(model, train, val, cfg, log_path)
    if out_path:
        store_checkpoint(result.model, out_path,
                         {"stage": "finetune", "method": cfg.method, "task": cfg.task, "train": asdict(cfg)})
    return result
