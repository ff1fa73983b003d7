"""Incremental inference for live sessions.

Audio arrives in arbitrary chunks. The encoder keeps just enough sample and
mel history to extend its full-history causal computation one frame at a
time; the Transformer layers are recomputed per frame over the trailing
context window, which makes each emitted frame identical (up to float
rounding) to the offline windowed forward pass.
"""

from __future__ import annotations

import json
import logging
import math
import socketserver
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .audio import SAMPLE_RATE, WIN_LENGTH, StereoAudio, frame_hop, mel_frames
from .errors import AudioTooShort, BindError, ConfigMismatch, ProtocolError, SessionClosed
from .labeling import normalize_task, task_classes
from .model import MEL_RATE, VAPModel, window_frames
from .state_codec import zero_shot_bc_score

logger = logging.getLogger(__name__)


@dataclass
class PredictionFrame:
    t: float
    p_bc: float
    p_vad: list
    vap_top_state: int
    zero_shot: float
    p_continuer: float | None = None
    p_assessment: float | None = None

    def to_message(self) -> dict:
        return {"type": "prediction", **asdict(self)}


class StreamSession:
    """Single-threaded state machine for one live dialogue."""

    def __init__(self, model: VAPModel, context: float | None = 5.0, task: str | None = None,
                 listener: int = 1, session_id: str = ""):
        cfg = model.cfg
        if cfg.encoder != "reference":
            raise ConfigMismatch("streaming needs a model with the reference audio encoder")
        self.model = model.eval()
        self.task = normalize_task(task) if task else ("binary" if cfg.bc_classes == 2 else "type")
        if task_classes(self.task) != cfg.bc_classes:
            raise ConfigMismatch(f"task {self.task} needs a {task_classes(self.task)}-class head, "
                                 f"model has {cfg.bc_classes}")
        self.session_id = session_id
        self.listener = listener
        self.context = context
        self.frame_rate = cfg.frame_rate
        self.window = window_frames(context, cfg.frame_rate) or cfg.max_context
        if self.window > cfg.max_context:
            raise ConfigMismatch(f"context of {self.window} frames exceeds max_context {cfg.max_context}")
        self.hop = frame_hop(SAMPLE_RATE, cfg.frame_rate)
        self.mel_hop = frame_hop(SAMPLE_RATE, MEL_RATE)
        self.stride = cfg.mel_stride
        self.rf = cfg.receptive_field
        self.dtype = next(model.parameters()).dtype
        self.closed = False
        self.reset()

    def reset(self) -> None:
        n_mels, d = self.model.cfg.n_mels, self.model.cfg.d_channel
        self._pcm = np.zeros((2, WIN_LENGTH))  # starts at absolute sample -WIN_LENGTH
        self._pcm_start = -WIN_LENGTH
        self._n_samples = 0
        self._mel = np.zeros((2, self.rf - 1, n_mels), dtype=np.float32)
        self._next_mel = 0
        self._feats = torch.zeros(2, 0, d, dtype=self.dtype)
        self.frames_emitted = 0

    def close(self) -> None:
        self.closed = True

    @property
    def buffered_frames(self) -> int:
        """Encoder-output frames held for the Transformer window."""
        return self._feats.shape[1]

    @property
    def buffered_samples(self) -> int:
        return self._pcm.shape[1]

    @property
    def buffered_mel_rows(self) -> int:
        return self._mel.shape[1]

    def _extend_mel(self, upto: int) -> None:
        """Compute mel rows through index ``upto`` (inclusive)."""
        n = upto + 1 - self._next_mel
        if n <= 0:
            return
        off = self.mel_hop * self._next_mel - WIN_LENGTH - self._pcm_start
        seg = self._pcm[:, off : off + (n - 1) * self.mel_hop + WIN_LENGTH]
        new = np.stack([mel_frames(seg[c], n, self.mel_hop, self.model.cfg.n_mels, SAMPLE_RATE) for c in (0, 1)])
        self._mel = np.concatenate([self._mel, new], axis=1)
        self._next_mel = upto + 1

    @torch.inference_mode()
    def push_audio(self, chunk) -> list[PredictionFrame]:
        """Buffer a (2, n) chunk and return predictions for newly completed frames."""
        if self.closed:
            raise SessionClosed(f"session {self.session_id!r} is closed")
        x = chunk.samples if isinstance(chunk, StereoAudio) else np.asarray(chunk, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != 2:
            raise ValueError("chunk must have shape (2, n)")
        self._pcm = np.concatenate([self._pcm, x.astype(np.float64)], axis=1)
        self._n_samples += x.shape[1]
        first, stop = self.frames_emitted, self._n_samples // self.hop
        if stop <= first:
            return []
        # Encoder: one valid convolution per new frame over its receptive field.
        self._extend_mel(self.stride * (stop - 1))
        base = self._next_mel - self._mel.shape[1]  # absolute mel index of row 0
        rows = np.stack([self._mel[:, self.stride * t - base - (self.rf - 1) : self.stride * t - base + 1]
                         for t in range(first, stop)], axis=1)  # (2, N, rf, n_mels)
        enc = self.model.encoder(torch.as_tensor(rows.reshape(-1, self.rf, rows.shape[-1]), dtype=self.dtype))
        enc = enc[:, 0].reshape(2, stop - first, -1)
        feats = torch.cat([self._feats, enc], dim=1)
        z = self._trunk_outputs(feats, first, stop)
        out = self.model.heads(z)
        frames = self._frames(out, first)
        # Keep only what later frames can still need.
        self._feats = feats[:, max(0, feats.shape[1] - (self.window - 1)) :] if self.window > 1 else feats[:, :0]
        self._mel = self._mel[:, -(self.rf - 1) :] if self.rf > 1 else self._mel[:, :0]
        keep_from = self.mel_hop * self._next_mel - WIN_LENGTH
        self._pcm = self._pcm[:, keep_from - self._pcm_start :]
        self._pcm_start = keep_from
        self.frames_emitted = stop
        return frames

    def _trunk_outputs(self, feats: torch.Tensor, first: int, stop: int) -> torch.Tensor:
        """Trunk output for frames [first, stop); ``feats`` ends at frame stop-1."""
        W = self.window
        offset = stop - feats.shape[1]  # absolute frame index of feats[:, 0]
        parts = []
        prefix_stop = min(stop, W - 1)
        if first < prefix_stop:
            # Frames before the window fills: their windows are prefixes of the stream.
            z = self.model.trunk(feats[0:1, : prefix_stop - offset], feats[1:2, : prefix_stop - offset])
            parts.append(z[0, first - offset :])
        lo = max(first, W - 1)
        if lo < stop:
            f = feats[:, lo - offset - (W - 1) :]
            w = f.unfold(1, W, 1).permute(1, 0, 3, 2)  # (N, 2, W, d)
            parts.append(self.model.trunk(w[:, 0], w[:, 1])[:, -1])
        return torch.cat(parts)

    def _frames(self, out, first: int) -> list[PredictionFrame]:
        bc = out.bc_probs.double().numpy()
        vad = out.vad_probs.double().numpy()
        vap = out.vap_probs.double().numpy()
        zs = zero_shot_bc_score(vap, self.listener)
        top = vap.argmax(axis=1)
        frames = []
        for i in range(bc.shape[0]):
            f = PredictionFrame(
                t=(first + i) / self.frame_rate,
                p_bc=float(bc[i, 1:].sum()),
                p_vad=[float(vad[i, 0]), float(vad[i, 1])],
                vap_top_state=int(top[i]),
                zero_shot=float(zs[i]),
            )
            if self.task == "type":
                f.p_continuer, f.p_assessment = float(bc[i, 1]), float(bc[i, 2])
            frames.append(f)
        return frames


# -- real-time factor ---------------------------------------------------------

@contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class RtfReport:
    rtf: float
    audio_seconds: float
    elapsed_seconds: float
    context: float | None
    frame_rate: int
    frames: int
    latency_p50_ms: float
    latency_p95_ms: float
    latency_max_ms: float


def measure_rtf(model: VAPModel, audio: StereoAudio, context: float | None = 5.0, frame_rate: int | None = None,
                warmup: float = 5.0, min_duration: float = 60.0) -> RtfReport:
    """Stream ``audio`` one frame period at a time on a single CPU thread.

    RTF is wall-clock processing time over audio duration; a short warm-up
    session runs first and is not timed.
    """
    if audio.duration < min_duration:
        raise AudioTooShort(f"RTF needs at least {min_duration:g} s of audio, got {audio.duration:.2f} s")
    rate = frame_rate or model.cfg.frame_rate
    if rate != model.cfg.frame_rate:
        raise ConfigMismatch(f"model runs at {model.cfg.frame_rate} Hz, asked to measure at {rate} Hz")
    hop = frame_hop(SAMPLE_RATE, rate)
    x = audio.samples
    with single_thread():
        warm = StreamSession(model, context)
        n_warm = min(x.shape[1], int(warmup * SAMPLE_RATE))
        for a in range(0, n_warm, hop):
            warm.push_audio(x[:, a : a + hop])
        sess = StreamSession(model, context)
        lat = []
        t0 = time.perf_counter()
        for a in range(0, x.shape[1], hop):
            s = time.perf_counter()
            sess.push_audio(x[:, a : a + hop])
            lat.append(time.perf_counter() - s)
        elapsed = time.perf_counter() - t0
    lat_ms = 1000 * np.asarray(lat)
    return RtfReport(elapsed / audio.duration, audio.duration, elapsed, context, rate, sess.frames_emitted,
                     float(np.percentile(lat_ms, 50)), float(np.percentile(lat_ms, 95)), float(lat_ms.max()))


# -- wire protocol ------------------------------------------------------------

def _error(code: str, msg: str) -> dict:
    return {"type": "error", "code": code, "msg": msg}


def parse_audio_message(msg: dict) -> np.ndarray:
    extra = [k for k in msg if k.startswith("pcm") and k not in ("pcm0", "pcm1")]
    if extra or "pcm0" not in msg or "pcm1" not in msg:
        raise ProtocolError("bad_channels", "audio messages carry exactly two channels, pcm0 and pcm1")
    if msg.get("sample_rate", SAMPLE_RATE) != SAMPLE_RATE:
        raise ProtocolError("bad_rate", f"sample_rate must be {SAMPLE_RATE}")
    try:
        chans = [np.asarray(msg[k], dtype=np.float64) for k in ("pcm0", "pcm1")]
    except (ValueError, TypeError):
        raise ProtocolError("bad_samples", "pcm0 and pcm1 must be lists of numbers") from None
    if any(c.ndim != 1 for c in chans):
        raise ProtocolError("bad_samples", "pcm0 and pcm1 must be flat lists of numbers")
    if len(chans[0]) != len(chans[1]):
        raise ProtocolError("bad_length", "pcm0 and pcm1 must have equal length")
    x = np.stack(chans)
    if not np.all(np.isfinite(x)):
        raise ProtocolError("bad_samples", "samples must be finite")
    return x


class ProtocolHandler:
    """Turns inbound newline-delimited JSON records into response records."""

    def __init__(self, model: VAPModel, context: float | None = 5.0, task: str | None = None,
                 session_id: str = ""):
        self.session = StreamSession(model, context, task, session_id=session_id)

    def handle(self, line: str) -> list[dict]:
        try:
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as e:
                raise ProtocolError("bad_json", str(e)) from None
            if not isinstance(msg, dict):
                raise ProtocolError("bad_json", "each record must be a JSON object")
            kind = msg.get("type")
            if kind == "reset":
                self.session.reset()
                return [{"type": "ok"}]
            if kind == "audio":
                x = parse_audio_message(msg)
                return [f.to_message() for f in self.session.push_audio(x)]
            raise ProtocolError("bad_type", f"unknown message type {kind!r}")
        except ProtocolError as e:
            return [_error(e.code, e.msg)]
        except SessionClosed as e:
            return [_error("closed", str(e))]


def _dump(rec: dict) -> str:
    return json.dumps(rec, allow_nan=False) + "\n"


def make_server(model: VAPModel, port: int, host: str = "127.0.0.1", context: float | None = 5.0,
                task: str | None = None) -> socketserver.ThreadingTCPServer:
    """Bound TCP server; one session per connection. Call ``serve_forever``."""
    counter = iter(range(1, 1 << 62))
    lock = threading.Lock()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            with lock:
                sid = f"conn{next(counter)}"
            proto = ProtocolHandler(model, context, task, sid)
            for raw in self.rfile:
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                for rec in proto.handle(line):
                    self.wfile.write(_dump(rec).encode())
                self.wfile.flush()
            proto.session.close()

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    try:
        server = socketserver.ThreadingTCPServer((host, port), Handler)
    except OSError as e:
        raise BindError(f"cannot bind {host}:{port}: {e}") from e
    server.daemon_threads = True
    return server


def serve_stdio(model: VAPModel, context: float | None = 5.0, task: str | None = None,
                stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    proto = ProtocolHandler(model, context, task, "stdio")
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        for rec in proto.handle(line):
            stdout.write(_dump(rec))
        stdout.flush()


def serve(model: VAPModel, port: int | None = None, stdio: bool = False, task: str | None = None,
          context: float | None = 5.0, host: str = "127.0.0.1") -> None:
    """Run until interrupted, over stdio or a TCP port."""
    if stdio:
        serve_stdio(model, context, task)
        return
    server = make_server(model, port, host, context, task)
    logger.info("serving on %s:%d", host, server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()


def frames_for(seconds: float, frame_rate: int) -> int:
    return int(math.floor(seconds * frame_rate + 1e-9))
