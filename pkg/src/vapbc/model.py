"""Two-channel voice activity projection network.

Per channel: causal reference encoder (log-mel -> conv stack) and a shared
channel-wise Transformer; then a stack of cross-attention layers in which
each channel queries the other; the concatenated channel states feed three
linear heads (projection over 256 states, current VAD, backchannel class).

Attention is causal everywhere. With a finite ``window`` the Transformer
layers for frame t see only frames (t - window, t], exactly as if the
sequence had been cropped to that span; the encoder always sees full history.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FeatureSequence
from .errors import (BadMagic, CheckpointError, ConfigMismatch, InvalidConfig, LengthMismatch, MissingTensor,
                     NoForwardPass, NotFound, VersionMismatch)
from .state_codec import N_STATES

logger = logging.getLogger(__name__)

MEL_RATE = 50
# Fixed affine scaling of log-mel energies; log(1e-10) maps to about -1.9.
MEL_OFFSET = -8.0
MEL_SCALE = 8.0

MAGIC = b"VAPB"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: str = "reference"  # "reference" | "external"
    d_channel: int = 256
    d_concat: int | None = None
    n_channel_layers: int = 1
    n_cross_layers: int = 3
    n_heads: int = 4
    frame_rate: int = 10
    bc_classes: int = 2
    max_context: int = 1024
    seed: int = 0
    n_mels: int = 40
    ffn_mult: int = 4
    dropout: float = 0.1
    conv_layers: int = 3
    conv_kernel: int = 5
    arch: str = "vap"  # "vap" | "baseline" (encoder + linear heads only)

    def __post_init__(self):
        if self.d_concat is None:
            self.d_concat = 2 * self.d_channel
        problems = []
        if self.encoder not in ("reference", "external"):
            problems.append(f"encoder must be 'reference' or 'external', not {self.encoder!r}")
        if self.arch not in ("vap", "baseline"):
            problems.append(f"arch must be 'vap' or 'baseline', not {self.arch!r}")
        if self.d_channel <= 0 or self.d_concat != 2 * self.d_channel:
            problems.append(f"d_concat ({self.d_concat}) must equal 2 * d_channel ({self.d_channel})")
        if self.n_heads <= 0 or self.d_channel % self.n_heads:
            problems.append(f"n_heads ({self.n_heads}) must divide d_channel ({self.d_channel})")
        if self.frame_rate not in (50, 10):
            problems.append(f"frame_rate must be 50 or 10, not {self.frame_rate}")
        if self.bc_classes not in (2, 3):
            problems.append(f"bc_classes must be 2 or 3, not {self.bc_classes}")
        if self.max_context <= 0 or self.n_channel_layers < 0 or self.n_cross_layers < 0:
            problems.append("max_context must be positive and layer counts non-negative")
        if self.n_mels < 8 or self.conv_layers < 1 or self.conv_kernel < 1:
            problems.append("need n_mels >= 8 and at least one conv layer")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.d_channel // self.n_heads

    @property
    def mel_stride(self) -> int:
        return MEL_RATE // self.frame_rate

    @property
    def receptive_field(self) -> int:
        """Encoder receptive field in 50 Hz mel frames."""
        return 1 + self.conv_layers * (self.conv_kernel - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    """Per-frame head outputs; tensors are (..., T, K)."""

    vap_logits: torch.Tensor
    vad_logits: torch.Tensor
    bc_logits: torch.Tensor

    @property
    def vap_probs(self) -> torch.Tensor:
        return self.vap_logits.softmax(-1)

    @property
    def vad_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.vad_logits)

    @property
    def bc_probs(self) -> torch.Tensor:
        return self.bc_logits.softmax(-1)

    def __len__(self) -> int:
        return self.vap_logits.shape[-2]

    def squeeze(self) -> "ModelOutput":
        return ModelOutput(self.vap_logits.squeeze(0), self.vad_logits.squeeze(0), self.bc_logits.squeeze(0))


class ReferenceEncoder(nn.Module):
    """Causal conv stack over 50 Hz log-mel, sampled at the model frame rate.

    Input rows are expected to carry ``receptive_field - 1`` rows of left
    context (zeros at stream start), so every output is a valid convolution.
    Model frame t reads mel rows up to index ``mel_stride * t``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, k = cfg.d_channel, cfg.conv_kernel
        self.stride = cfg.mel_stride
        self.receptive_field = cfg.receptive_field
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.n_mels if i == 0 else d, d, k) for i in range(cfg.conv_layers)
        )
        self.proj = nn.Linear(d, d)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = ((mel - MEL_OFFSET) / MEL_SCALE).transpose(1, 2)
        for conv in self.convs:
            x = F.gelu(conv(x))
        x = x[:, :, :: self.stride]
        return self.proj(x.transpose(1, 2))


class Attention(nn.Module):
    """Multi-head causal attention; regularised by the residual dropout of its block."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.n_heads

        def split(t):
            return t.view(B, L, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(ctx)), split(self.v(ctx))
        scores = (q @ k.transpose(-2, -1)) * (d // h) ** -0.5
        causal = torch.ones(L, L, dtype=torch.bool, device=x.device).triu_(1)
        att = scores.masked_fill(causal, float("-inf")).softmax(-1)
        return self.o((att @ v).transpose(1, 2).reshape(B, L, d))


class FeedForward(nn.Sequential):
    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__(nn.Linear(d, mult * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(mult * d, d))


class ChannelLayer(nn.Module):
    """Pre-norm causal self-attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_channel
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h))
        return x + self.drop(self.ffn(self.ln2(x)))


class CrossLayer(nn.Module):
    """Self-attention, then attention with this channel as query and the other as key/value."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_channel
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, other):
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h))
        x = x + self.drop(self.cross_attn(self.ln_q(x), self.ln_kv(other)))
        return x + self.drop(self.ffn(self.ln3(x)))


class VAPModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_channel
        self.encoder = ReferenceEncoder(cfg) if cfg.encoder == "reference" else None
        if cfg.arch == "vap":
            self.pos = nn.Embedding(cfg.max_context, d)
            self.channel_layers = nn.ModuleList(ChannelLayer(cfg) for _ in range(cfg.n_channel_layers))
            self.cross0 = nn.ModuleList(CrossLayer(cfg) for _ in range(cfg.n_cross_layers))
            self.cross1 = nn.ModuleList(CrossLayer(cfg) for _ in range(cfg.n_cross_layers))
            self.ln_out0 = nn.LayerNorm(d)
            self.ln_out1 = nn.LayerNorm(d)
        self.vap_head = nn.Linear(cfg.d_concat, N_STATES)
        self.vad_head = nn.Linear(cfg.d_concat, 2)
        self.bc_head = nn.Linear(cfg.d_concat, cfg.bc_classes)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- encoder ---------------------------------------------------------
    def pad_mel(self, mel: torch.Tensor) -> torch.Tensor:
        """Trim to whole model frames and prepend the zero left context."""
        stride, rf = self.cfg.mel_stride, self.cfg.receptive_field
        T = mel.shape[-2] // stride
        mel = mel[..., : T * stride, :]
        return F.pad(mel, (0, 0, rf - 1, 0))

    def encode(self, x: torch.Tensor, has_context: bool = False) -> torch.Tensor:
        """(B, T_mel, n_mels) log-mel -> (B, T, d); identity for external features."""
        if self.encoder is None:
            return x
        if not has_context:
            x = self.pad_mel(x)
        return self.encoder(x)

    # -- transformer trunk -----------------------------------------------
    def trunk(self, f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        """Causal pass over whole sequences; positions count from 0. -> (B, L, 2d)."""
        if self.cfg.arch == "baseline":
            return torch.cat([f0, f1], dim=-1)
        L = f0.shape[1]
        if L > self.cfg.max_context:
            raise InvalidConfig(f"sequence of {L} frames exceeds max_context {self.cfg.max_context}; pass a window")
        pos = self.pos.weight[:L]
        a, b = f0 + pos, f1 + pos
        for layer in self.channel_layers:
            a, b = layer(a), layer(b)
        for la, lb in zip(self.cross0, self.cross1):
            a, b = la(a, b), lb(b, a)
        return torch.cat([self.ln_out0(a), self.ln_out1(b)], dim=-1)

    def heads(self, z: torch.Tensor) -> ModelOutput:
        return ModelOutput(self.vap_head(z), self.vad_head(z), self.bc_head(z))

    def forward_features(self, f0: torch.Tensor, f1: torch.Tensor, window: int | None = None,
                         batch_windows: int = 256) -> ModelOutput:
        if f0.shape != f1.shape:
            raise LengthMismatch(f"channel features differ in shape: {tuple(f0.shape)} vs {tuple(f1.shape)}")
        B, T, d = f0.shape
        if T == 0:
            z = f0.new_zeros(B, 0, self.cfg.d_concat)
            return self.heads(z)
        if window is None or window >= T or self.cfg.arch == "baseline":
            return self.heads(self.trunk(f0, f1))
        if window < 1:
            raise ValueError("window must be at least one frame")
        parts = []
        if window > 1:
            parts.append(self.trunk(f0[:, : window - 1], f1[:, : window - 1]))
        # Every frame t >= window-1 gets its own cropped pass over (t-window, t].
        w0 = f0.unfold(1, window, 1).permute(0, 1, 3, 2)  # (B, N, W, d)
        w1 = f1.unfold(1, window, 1).permute(0, 1, 3, 2)
        N = w0.shape[1]
        w0 = w0.reshape(B * N, window, d)
        w1 = w1.reshape(B * N, window, d)
        tails = [self.trunk(w0[i : i + batch_windows], w1[i : i + batch_windows])[:, -1]
                 for i in range(0, B * N, batch_windows)]
        parts.append(torch.cat(tails).reshape(B, N, -1))
        return self.heads(torch.cat(parts, dim=1))

    def forward(self, x0: torch.Tensor, x1: torch.Tensor, window: int | None = None,
                has_context: bool = False) -> ModelOutput:
        return self.forward_features(self.encode(x0, has_context), self.encode(x1, has_context), window)


def init_model(config: ModelConfig, seed: int | None = None) -> VAPModel:
    """Build a model with parameters drawn deterministically from ``seed``."""
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VAPModel(config)
    logger.info("initialised model with %d parameters", model.n_params)
    return model


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, k = cfg.d_channel, cfg.conv_kernel
    n = 0
    if cfg.encoder == "reference":
        n += cfg.n_mels * d * k + d
        n += (cfg.conv_layers - 1) * (d * d * k + d)
        n += d * d + d
    if cfg.arch == "vap":
        attn = 4 * (d * d + d)
        ffn = 2 * cfg.ffn_mult * d * d + cfg.ffn_mult * d + d
        ln = 2 * d
        n += cfg.max_context * d
        n += cfg.n_channel_layers * (attn + ffn + 2 * ln)
        n += 2 * cfg.n_cross_layers * (2 * attn + ffn + 4 * ln)
        n += 2 * ln
    for out in (N_STATES, 2, cfg.bc_classes):
        n += cfg.d_concat * out + out
    return n


def compute_gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss``; returns a gradient (zeros if untouched) per trainable parameter."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise NoForwardPass("loss carries no autograd graph; run forward with gradients enabled")
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters() if p.requires_grad}


def reset_bc_head(model: VAPModel, bc_classes: int, seed: int = 0) -> VAPModel:
    """Attach a freshly initialised backchannel head with ``bc_classes`` outputs."""
    model.cfg.bc_classes = bc_classes
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = nn.Linear(model.cfg.d_concat, bc_classes)
    model.bc_head = head.to(dtype=model.vap_head.weight.dtype)
    return model


# -- checkpoints ----------------------------------------------------------

def store_checkpoint(model: VAPModel, path, meta: dict | None = None) -> None:
    """Write magic, version, JSON header (config + meta) and a float32 tensor table."""
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state_dict()
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
            f.write(header)
            f.write(struct.pack("<I", len(state)))
            for name, t in state.items():
                raw = name.encode()
                arr = t.detach().cpu().numpy().astype("<f4", copy=False)
                f.write(struct.pack("<HB", len(raw), arr.ndim))
                f.write(raw)
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr).tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MissingTensor(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"no such checkpoint: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise BadMagic(f"{path} is not a checkpoint (bad magic bytes)")
    r = _Reader(data)
    r.pos = 4
    try:
        version, hlen = r.unpack("<II", "header")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        header = json.loads(r.take(hlen, "header").decode())
    except MissingTensor as e:
        raise BadMagic(f"{path}: incomplete header") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    cfg = ModelConfig.from_dict(header["config"])
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, ndim = r.unpack("<HB", "tensor entry")
        name = r.take(nlen, "tensor name").decode()
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape)) if ndim else 1
        buf = r.take(4 * size, f"data of {name}")
        if name in tensors:
            raise CheckpointError(f"{path}: tensor {name} stored twice")
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return cfg, header.get("meta", {}), tensors


def load_checkpoint(path, expect_bc_classes: int | None = None, with_meta: bool = False):
    """Rebuild a model (in eval mode) from ``store_checkpoint`` output."""
    cfg, meta, tensors = read_checkpoint(path)
    if expect_bc_classes is not None and cfg.bc_classes != expect_bc_classes:
        raise ConfigMismatch(
            f"{path} has a {cfg.bc_classes}-class backchannel head but {expect_bc_classes} classes were requested")
    model = VAPModel(cfg)
    state = model.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise MissingTensor(f"{path}: missing tensors {missing[:5]}{'...' if len(missing) > 5 else ''}")
    extra = [k for k in tensors if k not in state]
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {extra[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tensors[k].shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {tensors[k].shape}, expected {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return (model, meta) if with_meta else model


# -- external feature files -------------------------------------------------

_FEAT_HEADER = struct.Struct("<IIf")


def write_feature_file(path, feats: FeatureSequence) -> None:
    """Header (T, D, frame_rate) then row-major little-endian float32."""
    arr = np.asarray(feats.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_FEAT_HEADER.pack(arr.shape[0], arr.shape[1], float(feats.frame_rate)))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_feature_file(path, channel_id: int = 0) -> FeatureSequence:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"no such feature file: {path}")
    with open(path, "rb") as f:
        head = f.read(_FEAT_HEADER.size)
        if len(head) != _FEAT_HEADER.size:
            raise CheckpointError(f"{path}: truncated feature header")
        T, D, rate = _FEAT_HEADER.unpack(head)
        body = f.read()
    if len(body) != 4 * T * D:
        raise CheckpointError(f"{path}: expected {T}x{D} floats, found {len(body) // 4}")
    return FeatureSequence(np.frombuffer(body, dtype="<f4").reshape(T, D).copy(), rate, channel_id)


# -- convenience ------------------------------------------------------------

def window_frames(context: float | None, frame_rate: int) -> int | None:
    if context is None:
        return None
    return max(1, int(round(context * frame_rate)))


def session_inputs(model: VAPModel, session) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    src = session.features if model.cfg.encoder == "external" else session.mel
    if src is None:
        raise ValueError(f"session {session.name} has no inputs for a {model.cfg.encoder} encoder")
    x = torch.as_tensor(src, dtype=dtype)
    return x[0:1], x[1:2]


@torch.inference_mode()
def run_session(model: VAPModel, session, context: float | None = None, batch_windows: int = 256) -> ModelOutput:
    """Offline forward over one session with the Transformer context in seconds."""
    model.eval()
    x0, x1 = session_inputs(model, session)
    out = model.forward_features(model.encode(x0), model.encode(x1),
                                 window_frames(context, model.cfg.frame_rate), batch_windows).squeeze()
    if len(out) != session.n_frames:
        raise LengthMismatch(f"{session.name}: model produced {len(out)} frames for {session.n_frames} labels")
    return out


def encode_reference(audio_channel, model: VAPModel) -> FeatureSequence:
    """Audio samples -> encoder features at the model frame rate."""
    from .audio import log_mel

    if model.encoder is None:
        raise InvalidConfig("encode_reference needs a model with the reference encoder")
    mel = log_mel(audio_channel, 16000, MEL_RATE, model.cfg.n_mels).frames
    dtype = next(model.parameters()).dtype
    with torch.inference_mode():
        f = model.encode(torch.as_tensor(mel, dtype=dtype)[None])[0]
    return FeatureSequence(f.numpy(), model.cfg.frame_rate)

