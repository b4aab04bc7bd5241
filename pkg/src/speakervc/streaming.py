"""Chunk-wise streaming conversion.

Input is consumed on a fixed internal block grid of ``chunk_s`` seconds,
independent of how the caller splits the audio. Block ``b`` (output samples
``[b*C, (b+1)*C)``) is processed once ``(b+1)*C + D`` input samples have
arrived, where ``D`` is the total delay. The delay pays for two lookaheads:
the frontend's analysis window plus delta context, and future mel frames
handed to the phase reconstruction. Recurrent decoder state is carried from
block to block; lookahead frames are decoded from a copy of that state and
never committed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .audio import DECODER_MEL, FLOOR_TOL, MelSpectrogram, Waveform, _window, griffin_lim, mel_to_power, power_to_logmel
from .data import derive_seed
from .decoders import VCSystem, as_batch, reference_conditioning
from .units import FRONTEND, cepstra_from_logmel

HOP = DECODER_MEL.hop_length
HALF = DECODER_MEL.n_fft // 2
DELTA = FRONTEND.delta_width
CROSSFADE = HOP


@dataclass(frozen=True)
class StreamConfig:
    chunk_s: float = 0.2
    total_delay_s: float = 0.8
    past_context_s: float = 2.0
    frontend_share: float = 0.5       # fraction of the delay reserved for frontend lookahead
    gl_iterations: int = 32
    gl_past_s: float = 0.2            # already-emitted audio re-entered into each phase-reconstruction window
    seed: int = 0

    def __post_init__(self):
        if not (self.chunk_s > 0 and self.total_delay_s > 0):
            raise ValueError("chunk_s and total_delay_s must be positive")
        if self.chunk_s > self.total_delay_s:
            raise ValueError("chunk_s must not exceed total_delay_s")
        if self.past_context_s < 0:
            raise ValueError("past_context_s must be >= 0")
        if not 0 < self.frontend_share < 1:
            raise ValueError("frontend_share must lie in (0, 1)")

    def samples(self, seconds: float) -> int:
        return int(round(seconds * DECODER_MEL.sample_rate_hz))

    @property
    def chunk_frames(self) -> int:
        n = self.samples(self.chunk_s)
        if n % HOP:
            raise ValueError(f"chunk_s must be a multiple of the {HOP}-sample hop")
        return n // HOP


@dataclass(frozen=True)
class StreamChunk:
    """Audio with its absolute start offset in samples, for order checking."""

    offset: int
    waveform: Waveform


def frontend_lookahead_samples() -> int:
    """Input needed beyond a frame's centre to finish its features: half a window plus the delta context."""
    return HALF + DELTA * HOP


class StreamingConverter:
    def __init__(self, system: VCSystem, reference: Waveform, cfg: StreamConfig = StreamConfig(),
                 record_mel: bool = False):
        self.system = system
        self.cfg = cfg
        self.model = system.decoder
        self.sr = DECODER_MEL.sample_rate_hz
        self.C = cfg.samples(cfg.chunk_s)
        self.D = cfg.samples(cfg.total_delay_s)
        self.block_frames = cfg.chunk_frames
        frontend_budget = int(round(cfg.frontend_share * self.D))
        if frontend_lookahead_samples() > frontend_budget:
            raise ValueError("delay budget too small for the frontend lookahead")
        self.lookahead_frames = max(0, (self.D - frontend_budget) // HOP)
        self.past_samples = cfg.samples(cfg.past_context_s)
        self.gl_past_frames = min(int(round(cfg.gl_past_s / DECODER_MEL.hop_s)),
                                  max(0, (self.past_samples - HALF) // HOP - 1))

        spk, style = reference_conditioning(reference, system)
        self.cond = self.model.condition(None if spk is None else as_batch(spk),
                                         None if style is None else as_batch(style))
        self.model.eval()
        self.window = _window(DECODER_MEL.n_fft, DECODER_MEL.win_length)

        self.buf = np.zeros(0)            # input samples [buf_start, received)
        self.buf_start = 0
        self.received = 0
        self.ended = False
        self.cepstra: dict[int, np.ndarray] = {}
        self.state = {"enc": None, "pred": None, "dec": None}
        self.mel_cache: dict[int, np.ndarray] = {}     # committed mel frames still inside the past window
        self.angles: dict[int, np.ndarray] = {}
        self.next_block = 0
        self.emitted = 0
        self.tail = np.zeros(0)
        self.compute_s = 0.0
        self.log: list[dict] = []
        self.chunk_index = 0
        self.first_emission_at: int | None = None
        self.avail = 0
        self.oldest_read: list[tuple[int, int]] = []    # (block start sample, oldest input sample read)
        self.record_mel = record_mel
        self.committed_mel: list[np.ndarray] = []

    # -- input side
    def push(self, chunk) -> Waveform:
        if self.ended:
            raise ValueError("stream already finished")
        if isinstance(chunk, StreamChunk):
            if chunk.offset != self.received:
                raise ValueError(f"out-of-order or overlapping chunk: offset {chunk.offset}, expected {self.received}")
            chunk = chunk.waveform
        if chunk.sample_rate_hz != self.sr:
            raise ValueError(f"sample-rate change: stream runs at {self.sr} Hz, chunk is {chunk.sample_rate_hz} Hz")
        t0 = time.perf_counter()
        self.buf = np.concatenate([self.buf, chunk.samples])
        self.received += len(chunk)
        out = self._run()
        return self._account(out, t0)

    def finish(self) -> Waveform:
        t0 = time.perf_counter()
        self.ended = True
        out = self._run()
        return self._account(out, t0)

    def _account(self, out: np.ndarray, t0: float) -> Waveform:
        self.compute_s += time.perf_counter() - t0
        if len(out) and self.first_emission_at is None:
            self.first_emission_at = self.received
        self.emitted += len(out)
        self.log.append({"chunk": self.chunk_index, "samples_in": self.received, "samples_out": self.emitted,
                         "compute_s": self.compute_s})
        self.chunk_index += 1
        return Waveform(out, self.sr)

    def _ready(self, b: int) -> bool:
        start = b * self.C
        if self.ended:
            return start < self.received
        return self.received >= start + self.C + self.D

    def _run(self) -> np.ndarray:
        pieces = []
        while self._ready(self.next_block):
            pieces.append(self._process_block(self.next_block))
            self.next_block += 1
        return np.concatenate(pieces) if pieces else np.zeros(0)

    # -- frontend
    def _sample(self, idx: np.ndarray) -> np.ndarray:
        """Input samples by absolute index with reflect padding at the stream edges."""
        idx = np.where(idx < 0, -idx, idx)
        if self.ended:
            n = self.received
            idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
        if idx.min() < self.buf_start:
            raise AssertionError("read before the retained past context")
        return self.buf[idx - self.buf_start]

    def _n_frames_total(self) -> int | None:
        return math.ceil(self.received / HOP) if self.ended else None

    def _frame_available(self, t: int) -> bool:
        return self.ended or t * HOP + HALF <= self.avail

    def _cepstrum(self, t: int, reads: list) -> np.ndarray:
        reads.append(t * HOP - HALF)
        if t in self.cepstra:
            return self.cepstra[t]
        idx = np.arange(t * HOP - HALF, t * HOP + HALF)
        frame = self._sample(idx) * self.window
        power = np.abs(np.fft.rfft(frame)) ** 2
        c = cepstra_from_logmel(power_to_logmel(power[None], DECODER_MEL), FRONTEND)[0]
        if self._frame_available(t):
            self.cepstra[t] = c
        return c

    def _features(self, t0: int, t1: int, reads: list) -> np.ndarray:
        """Cepstra plus regression deltas for frames [t0, t1), replicating edge frames as offline."""
        total = self._n_frames_total()
        lo, hi = t0 - DELTA, t1 + DELTA
        ts = np.arange(lo, hi)
        ts = np.maximum(ts, 0)
        if total is not None:
            ts = np.minimum(ts, total - 1)
        c = np.stack([self._cepstrum(int(t), reads) for t in ts])
        n = t1 - t0
        num = np.zeros((n, c.shape[1]))
        for k in range(1, DELTA + 1):
            num += k * (c[DELTA + k:DELTA + k + n] - c[DELTA - k:DELTA - k + n])
        d = num / (2 * sum(k * k for k in range(1, DELTA + 1)))
        return np.concatenate([c[DELTA:DELTA + n], d], axis=1)

    # -- decoder
    @torch.no_grad()
    def _decode(self, feats: np.ndarray, state: dict) -> tuple[np.ndarray, dict]:
        logits = self.system.projection(feats)
        m = self.model
        units = as_batch(logits)
        enc, s_enc = m.encode(units, self.cond, state["enc"])
        raw, s_pred = m.predict_prosody(enc, self.cond, state["pred"])
        mel, s_dec = m.decode(enc, m.predicted_prosody_features(raw), self.cond, state["dec"])
        mel = mel.clamp_min(DECODER_MEL.log_floor)[0].double().numpy()
        return mel, {"enc": s_enc, "pred": s_pred, "dec": s_dec}

    def _process_block(self, b: int) -> np.ndarray:
        reads: list[int] = []
        # nominal input position of this block, so results never depend on chunk boundaries
        self.avail = self.received if self.ended else (b + 1) * self.C + self.D
        f0 = b * self.block_frames
        total = self._n_frames_total()
        f1 = f0 + self.block_frames if total is None else min(f0 + self.block_frames, total)
        committed, self.state = self._decode(self._features(f0, f1, reads), self.state)
        for i, t in enumerate(range(f0, f1)):
            self.mel_cache[t] = committed[i]
        if self.record_mel:
            self.committed_mel.append(committed)

        # lookahead frames from a copy of the state; never committed
        la_end = f1 + self.lookahead_frames
        while la_end > f1 and not (self._frame_available(la_end - 1 + DELTA) and
                                   (total is None or la_end <= total)):
            la_end -= 1
        if la_end > f1:
            look, _ = self._decode(self._features(f1, la_end, reads), dict(self.state))
        else:
            look = np.zeros((0, committed.shape[1]))

        g0 = max(0, f0 - self.gl_past_frames)
        reads.append(g0 * HOP - HALF)
        past = [self.mel_cache[t] for t in range(g0, f0)]
        window_mel = np.concatenate([np.array(past).reshape(-1, committed.shape[1]), committed, look])
        audio = self._invert(window_mel, g0)
        start = (f0 - g0) * HOP
        n_out = self.C if total is None else min(self.C, self.received - b * self.C)
        seg = audio[start:start + n_out + CROSSFADE]
        out, nxt = seg[:n_out].copy(), seg[n_out:]
        if self.tail.size:
            k = min(len(self.tail), len(out))
            ramp = (np.arange(k) + 0.5) / k
            out[:k] = self.tail[:k] * (1 - ramp) + out[:k] * ramp
        self.tail = nxt
        if total is not None and b * self.C + n_out >= self.received:
            self.tail = np.zeros(0)

        self.oldest_read.append((b * self.C, min(max(0, r) for r in reads)))
        if b * self.C - self.oldest_read[-1][1] > self.past_samples:
            raise AssertionError("block read history older than the past context")
        self._trim(b)
        return out

    def _invert(self, mel: np.ndarray, g0: int) -> np.ndarray:
        if np.all(mel <= DECODER_MEL.log_floor + FLOOR_TOL):
            return np.zeros(len(mel) * HOP)
        mag = np.sqrt(mel_to_power(mel, DECODER_MEL))
        init = np.empty(mag.shape, dtype=np.complex128)
        for i in range(len(mel)):
            t = g0 + i
            if t in self.angles:
                init[i] = self.angles[t]
            else:
                rng = np.random.default_rng(derive_seed(self.cfg.seed, "gl-frame", t))
                init[i] = np.exp(2j * np.pi * rng.random(mag.shape[1]))
        audio, angles = griffin_lim(mag, DECODER_MEL, self.cfg.gl_iterations, init_angles=init,
                                    return_angles=True)
        for i in range(len(mel)):
            self.angles[g0 + i] = angles[i]
        return np.clip(audio, -1.0, 1.0)

    def _trim(self, b: int) -> None:
        """Forget everything the next block can no longer read."""
        next_f0 = (b + 1) * self.block_frames
        keep_frame = next_f0 - max(self.gl_past_frames, DELTA)
        for store in (self.mel_cache, self.angles, self.cepstra):
            for t in [t for t in store if t < keep_frame]:
                del store[t]
        keep_sample = max(0, keep_frame * HOP - HALF)
        if keep_sample > self.buf_start:
            self.buf = self.buf[keep_sample - self.buf_start:]
            self.buf_start = keep_sample

    @property
    def buffered_past_s(self) -> float:
        past = max(0, self.next_block * self.C - self.buf_start)
        return past / self.sr

    def mel(self) -> MelSpectrogram:
        if not self.record_mel:
            raise ValueError("converter was created without record_mel")
        return MelSpectrogram(np.concatenate(self.committed_mel) if self.committed_mel
                              else np.zeros((0, DECODER_MEL.n_mels)), DECODER_MEL)

    def write_log(self, path) -> None:
        with open(path, "w") as f:
            for row in self.log:
                f.write(json.dumps(row, sort_keys=True) + "\n")


def stream_convert(chunks, reference: Waveform, system: VCSystem, cfg: StreamConfig = StreamConfig(),
                   converter: StreamingConverter | None = None) -> list[Waveform]:
    """Feed ``chunks`` through a streaming converter; the last piece flushes the stream."""
    conv = converter or StreamingConverter(system, reference, cfg)
    out = [conv.push(c) for c in chunks]
    out.append(conv.finish())
    return out


def split_chunks(w: Waveform, sizes) -> list[Waveform]:
    """Split a waveform into consecutive pieces of the given sample counts (the last takes the remainder)."""
    pieces, pos = [], 0
    for n in sizes:
        if pos >= len(w):
            break
        pieces.append(Waveform(w.samples[pos:pos + n], w.sample_rate_hz))
        pos += n
    if pos < len(w):
        pieces.append(Waveform(w.samples[pos:], w.sample_rate_hz))
    return pieces


def measure_stream_rtf(conv: StreamingConverter) -> float:
    from .evaluation import measure_rtf
    return measure_rtf(conv.received / conv.sr, conv.compute_s)
