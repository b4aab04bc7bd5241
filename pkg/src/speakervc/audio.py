"""Waveform container, mel analysis, whisperization, SNR estimation and mel inversion."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.linalg import solve_toeplitz

LOG_FLOOR = math.log(1e-5)
FLOOR_TOL = 1e-4           # a float32-rounded floor still reads as silence

# voicing analysis
PITCH_FMIN_HZ = 60.0
PITCH_FMAX_HZ = 400.0
VOICING_WIN_S = 0.04
VOICING_LPC_ORDER = 16
VOICING_RATE_HZ = 16000    # above the speech band, 16-bit quantisation noise would dominate the whitened residual
VOICING_NOISE_FLOOR = 3e-5  # white-noise correction, about 45 dB below the frame energy
VOICED_THRESHOLD = 0.3


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def crop(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop], self.sample_rate_hz)


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int
    n_fft: int
    win_length: int
    hop_length: int
    n_mels: int
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate_hz / 2)
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ValueError("need 0 < hop_length <= win_length <= n_fft")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate_hz / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def hop_s(self) -> float:
        return self.hop_length / self.sample_rate_hz

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        return cls(**d)


DECODER_MEL = MelConfig(sample_rate_hz=24000, n_fft=1024, win_length=1024, hop_length=240, n_mels=80)
SPK_MEL = MelConfig(sample_rate_hz=16000, n_fft=512, win_length=400, hop_length=160, n_mels=40)

MEL_CONFIGS = {"decoder": DECODER_MEL, "speaker": SPK_MEL}


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    config: MelConfig = field(default=DECODER_MEL)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.config.n_mels:
            raise ValueError(f"mel values must be frames x {self.config.n_mels}, got {v.shape}")
        v = np.maximum(v, self.config.log_floor)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            if channels != 1 or width != 2 or f.getcomptype() != "NONE":
                raise AudioFormatError(f"unsupported format: {path} (need 16-bit PCM mono)")
            raw = f.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"unsupported format: {path} ({exc})") from exc
    if n == 0:
        raise AudioFormatError(f"zero-length audio: {path}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32767.0, rate)


def save_wav(path, w: Waveform) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    if len(w) == 0:
        raise AudioFormatError("refusing to write zero-length audio")
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def resample(w: Waveform, sample_rate_hz: int) -> Waveform:
    """Rational-factor polyphase resampling (24 kHz <-> 16 kHz in practice)."""
    if sample_rate_hz == w.sample_rate_hz:
        return w
    g = math.gcd(sample_rate_hz, w.sample_rate_hz)
    up, down = sample_rate_hz // g, w.sample_rate_hz // g
    if up > 16 or down > 16:
        raise ValueError(f"unsupported resampling ratio {w.sample_rate_hz} -> {sample_rate_hz}")
    return Waveform(signal.resample_poly(w.samples, up, down), sample_rate_hz)


# ---------------------------------------------------------------------------
# STFT / mel


def n_frames_for(n_samples: int, hop_length: int) -> int:
    return -(-n_samples // hop_length)


@lru_cache(maxsize=None)
def _window(n_fft: int, win_length: int) -> np.ndarray:
    w = signal.get_window("hann", win_length, fftbins=True)
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left:left + win_length] = w
    out.setflags(write=False)
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def triangular_filters(cfg: MelConfig, freqs: np.ndarray) -> np.ndarray:
    """Area-normalised mel triangles of ``cfg`` evaluated at arbitrary frequencies."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb * (2.0 / (hi - lo))


@lru_cache(maxsize=None)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular, area-normalised filters, shape (n_mels, n_fft//2 + 1)."""
    fb = triangular_filters(cfg, np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate_hz))
    fb.setflags(write=False)
    return fb


def frame_signal(padded: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    """Frame t covers padded[t*hop : t*hop + n_fft]."""
    need = (n_frames - 1) * hop + n_fft
    if padded.shape[0] < need:
        padded = np.pad(padded, (0, need - padded.shape[0]))
    view = np.lib.stride_tricks.sliding_window_view(padded, n_fft)
    return view[::hop][:n_frames]


def center_pad(x: np.ndarray, n_fft: int) -> np.ndarray:
    return np.pad(x, (n_fft // 2, n_fft // 2), mode="reflect")


def stft(x: np.ndarray, n_fft: int, hop: int, win_length: int) -> np.ndarray:
    """Centre-padded STFT with ceil(N/hop) frames; returns (frames, n_fft//2+1)."""
    n = n_frames_for(x.shape[0], hop)
    frames = frame_signal(center_pad(x, n_fft), n_fft, hop, n)
    return np.fft.rfft(frames * _window(n_fft, win_length), axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int, win_length: int, length: int) -> np.ndarray:
    win = _window(n_fft, win_length)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    n = spec.shape[0]
    total = (n - 1) * hop + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n):
        out[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += win ** 2
    out = out / np.where(norm > 1e-8, norm, 1.0)
    pad = n_fft // 2
    out = out[pad:pad + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


def power_to_logmel(power: np.ndarray, cfg: MelConfig) -> np.ndarray:
    energy = power @ mel_filterbank(cfg).T
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(energy), cfg.log_floor)


def mel_spectrogram(w: Waveform, cfg: MelConfig = DECODER_MEL) -> MelSpectrogram:
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"sample-rate mismatch: waveform {w.sample_rate_hz} Hz, config {cfg.sample_rate_hz} Hz")
    if len(w) < cfg.hop_length:
        raise ValueError(f"waveform shorter than one hop ({len(w)} < {cfg.hop_length} samples)")
    spec = stft(w.samples, cfg.n_fft, cfg.hop_length, cfg.win_length)
    return MelSpectrogram(power_to_logmel(np.abs(spec) ** 2, cfg), cfg)


# ---------------------------------------------------------------------------
# LPC helpers, voicing, whisperization


def lpc(frame: np.ndarray, order: int, lag_window: float = 0.0,
        noise_floor: float = 1e-9) -> tuple[np.ndarray, float]:
    """Autocorrelation-method LPC. Returns (a, err) with a[0] == 1.

    ``lag_window`` is a Gaussian lag-window width in cycles per sample (0 disables it);
    ``noise_floor`` scales up r[0] so empty bands are not whitened into prominence.
    """
    n = frame.shape[0]
    spec = np.fft.rfft(frame, 2 * n)
    r = np.fft.irfft(np.abs(spec) ** 2)[:order + 1]
    if r[0] <= 1e-12:
        return np.r_[1.0, np.zeros(order)], 0.0
    r = r.copy()
    r[0] *= 1.0 + noise_floor
    if lag_window > 0:
        r[1:] *= np.exp(-0.5 * (2 * np.pi * lag_window * np.arange(1, order + 1)) ** 2)
    coeffs = solve_toeplitz(r[:order], -r[1:order + 1])
    a = np.r_[1.0, coeffs]
    err = float(max(r @ a, 0.0))
    return a, err


def _voicing_frames(x: np.ndarray, sr: int, hop: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame (voicing score, pitch lag in samples, energy) on frames centred at t*hop."""
    win = int(round(VOICING_WIN_S * sr))
    min_lag = int(math.floor(sr / PITCH_FMAX_HZ))
    max_lag = int(math.ceil(sr / PITCH_FMIN_HZ))
    n = n_frames_for(x.shape[0], hop)
    padded = np.pad(x, (win // 2, win // 2 + hop))
    frames = frame_signal(padded, win, hop, n)
    energy = np.sum(frames ** 2, axis=1)
    scores = np.zeros(n)
    lags = np.zeros(n)
    taper = signal.get_window("hann", win, fftbins=False)
    for t in range(n):
        if energy[t] <= 1e-10:
            continue
        a, _ = lpc(frames[t] * taper, VOICING_LPC_ORDER, noise_floor=VOICING_NOISE_FLOOR)
        res = signal.lfilter(a, [1.0], frames[t])[VOICING_LPC_ORDER:]
        scores[t], lags[t] = _max_nccf(res, min_lag, max_lag)
    return scores, lags, energy


def _max_nccf(x: np.ndarray, min_lag: int, max_lag: int, octave_tol: float = 0.85) -> tuple[float, float]:
    """Peak normalised cross-correlation and its lag.

    The lag is the shortest local maximum reaching ``octave_tol`` of the peak
    (guards against picking a period multiple), refined by parabolic interpolation.
    """
    n = x.shape[0]
    max_lag = min(max_lag, n // 2)
    if max_lag <= min_lag:
        return 0.0, 0.0
    m = 1 << int(math.ceil(math.log2(2 * n)))
    ac = np.fft.irfft(np.abs(np.fft.rfft(x, m)) ** 2)[: max_lag + 2]
    c = np.concatenate([[0.0], np.cumsum(x ** 2)])
    lags = np.arange(min_lag - 1, max_lag + 2)
    e_head = c[n - lags]            # sum x[0:n-lag]^2
    e_tail = c[n] - c[lags]         # sum x[lag:n]^2
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 1e-12, ac[lags] / denom, 0.0)
    inner = r[1:-1]
    best = float(np.max(inner))
    if best <= 0:
        return best, 0.0
    peaks = np.flatnonzero((inner >= octave_tol * best) & (inner >= r[:-2]) & (inner >= r[2:]))
    i = int(peaks[0]) + 1 if peaks.size else int(np.argmax(inner)) + 1
    a, b, d = r[i - 1], r[i], r[i + 1]
    curv = a - 2 * b + d
    shift = 0.5 * (a - d) / curv if curv < 0 else 0.0
    return best, float(lags[i] + np.clip(shift, -0.5, 0.5))


def active_frames(energy: np.ndarray, range_db: float = 30.0) -> np.ndarray:
    if energy.size == 0 or energy.max() <= 1e-10:
        return np.zeros(energy.shape, dtype=bool)
    return energy >= energy.max() * 10 ** (-range_db / 10)


def _analysis_rate(w: Waveform, hop_length: int | None) -> tuple[Waveform, int]:
    """Move the analysis to 16 kHz when the frame grid survives the rate change."""
    hop = hop_length or int(round(0.01 * w.sample_rate_hz))
    if w.sample_rate_hz > VOICING_RATE_HZ and (hop * VOICING_RATE_HZ) % w.sample_rate_hz == 0:
        return resample(w, VOICING_RATE_HZ), hop * VOICING_RATE_HZ // w.sample_rate_hz
    return w, hop


def frame_voicing(w: Waveform, hop_length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame voicing scores and an activity mask, frames aligned to ``hop_length``.

    The score is the maximum normalised cross-correlation of the LPC residual
    over lags corresponding to 60-400 Hz.
    """
    w, hop = _analysis_rate(w, hop_length)
    scores, _, energy = _voicing_frames(w.samples, w.sample_rate_hz, hop)
    return scores, active_frames(energy)


def frame_pitch(w: Waveform, hop_length: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame f0 in Hz (0 where no lag was found), voicing scores and activity mask."""
    w, hop = _analysis_rate(w, hop_length)
    scores, lags, energy = _voicing_frames(w.samples, w.sample_rate_hz, hop)
    f0 = np.where(lags > 0, w.sample_rate_hz / np.maximum(lags, 1e-9), 0.0)
    return f0, scores, active_frames(energy)


def voicing_score(w: Waveform) -> float:
    """Mean per-frame voicing score over the active (non-silent) frames."""
    scores, active = frame_voicing(w)
    if not active.any():
        return 0.0
    return float(scores[active].mean())


def whisperize(w: Waveform, seed: int = 0, order: int = 16, frame_s: float = 0.02) -> Waveform:
    """Replace the excitation with white noise while keeping the LPC envelope.

    Frame-wise LPC analysis (Hann, 50 % overlap), noise resynthesis through the
    all-pole filter, per-frame energy matching and overlap-add.
    """
    if len(w) == 0:
        raise ValueError("cannot whisperize empty waveform")
    x = w.samples
    n_win = int(round(frame_s * w.sample_rate_hz))
    n_win += n_win % 2
    hop = n_win // 2
    win = signal.get_window("hann", n_win, fftbins=True)
    n = x.shape[0]
    n_frames = n_frames_for(n + hop, hop) + 1
    padded = np.pad(x, (hop, n_frames * hop + n_win - n - hop))
    out = np.zeros_like(padded)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(padded.shape[0] + n_win)
    for t in range(n_frames):
        seg = padded[t * hop:t * hop + n_win] * win
        e_in = float(seg @ seg)
        if e_in <= 1e-14:
            continue
        a, _ = lpc(seg, order, lag_window=40.0 / w.sample_rate_hz)
        # warm the filter with extra noise so the frame starts in steady state
        exc = noise[t * hop:t * hop + n_win + hop]
        y = signal.lfilter([1.0], a, exc)[hop:] * win
        e_out = float(y @ y)
        if e_out > 0:
            out[t * hop:t * hop + n_win] += y * math.sqrt(e_in / e_out)
    return Waveform(out[hop:hop + n], w.sample_rate_hz)


# ---------------------------------------------------------------------------
# SNR


def estimate_snr(w: Waveform, frame_s: float = 0.025, margin_db: float = 3.0) -> float:
    """Energy-percentile SNR estimate in dB, clamped to [-20, 60].

    Speech frames are those above the 60th energy percentile, noise frames those
    below the 20th. Speech frames must also exceed the noise level by
    ``margin_db``; without any such frame the input is treated as speech-free.
    """
    if w.duration_s < 0.5:
        raise ValueError(f"need at least 0.5 s for SNR estimation, got {w.duration_s:.3f} s")
    n = int(round(frame_s * w.sample_rate_hz))
    m = len(w) // n
    frames = w.samples[: m * n].reshape(m, n)
    energy = np.mean(frames ** 2, axis=1)
    if energy.max() <= 0:
        return -20.0
    hi, lo = np.percentile(energy, 60), np.percentile(energy, 20)
    noise = energy[energy <= lo]
    p_noise = float(noise.mean())
    speech = energy[(energy >= hi) & (energy > p_noise * 10 ** (margin_db / 10))]
    if speech.size == 0:
        return -20.0
    if p_noise <= 0:
        return 60.0
    snr = 10 * math.log10(float(speech.mean()) / p_noise)
    return float(min(max(snr, -20.0), 60.0))


# ---------------------------------------------------------------------------
# inversion


def mel_to_power(values: np.ndarray, cfg: MelConfig, iterations: int = 30) -> np.ndarray:
    """Non-negative linear spectrum consistent with the mel energies (multiplicative updates)."""
    fb = mel_filterbank(cfg)
    energy = np.where(values > cfg.log_floor + FLOOR_TOL, np.exp(values), 0.0)
    colsum = fb.sum(axis=0)
    power = (energy @ fb) / np.where(colsum > 0, colsum, 1.0)
    for _ in range(iterations):
        approx = power @ fb.T
        ratio = np.where(approx > 1e-30, energy / np.maximum(approx, 1e-30), 0.0)
        power *= (ratio @ fb) / np.where(colsum > 0, colsum, 1.0)
    return power


def griffin_lim(magnitude: np.ndarray, cfg: MelConfig, iterations: int, seed: int = 0,
                momentum: float = 0.99, init_angles: np.ndarray | None = None,
                return_angles: bool = False):
    """Fast Griffin-Lim (momentum variant) on centre-padded frames; length = frames * hop.

    ``init_angles`` (frames x bins, unit-modulus complex) replaces the random
    phase initialisation when given.
    """
    import torch

    n_frames = magnitude.shape[0]
    length = n_frames * cfg.hop_length
    win = torch.from_numpy(np.array(_window(cfg.n_fft, cfg.win_length), dtype=np.float32))
    mag = torch.from_numpy(np.ascontiguousarray(magnitude.T, dtype=np.float32))
    if init_angles is None:
        rng = np.random.default_rng(seed)
        init_angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    angles = torch.from_numpy(np.ascontiguousarray(init_angles.T, dtype=np.complex64))
    prev = torch.zeros_like(angles)

    def inverse(spec):
        # torch frames a length-L signal into 1 + L // hop frames; the last is padding here
        full = torch.cat([spec, torch.zeros_like(spec[:, :1])], dim=1)
        return torch.istft(full, cfg.n_fft, cfg.hop_length, cfg.n_fft, win, center=True, length=length)

    for _ in range(iterations):
        x = inverse(mag * angles)
        rebuilt = torch.stft(x, cfg.n_fft, cfg.hop_length, cfg.n_fft, win, center=True,
                             pad_mode="reflect", return_complex=True)[:, :n_frames]
        accel = rebuilt - (momentum / (1 + momentum)) * prev
        prev = rebuilt
        angles = accel / accel.abs().clamp_min(1e-16)
    out = inverse(mag * angles).numpy().astype(np.float64)
    if return_angles:
        return out, angles.numpy().T.astype(np.complex128)
    return out


def invert_mel(m: MelSpectrogram, iterations: int = 32, seed: int = 0) -> Waveform:
    """Mel-to-waveform inversion: non-negative spectrum recovery + Griffin-Lim."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = m.config
    length = m.n_frames * cfg.hop_length
    if np.all(m.values <= cfg.log_floor + FLOOR_TOL):
        return Waveform(np.zeros(length), cfg.sample_rate_hz)
    mag = np.sqrt(mel_to_power(m.values, cfg))
    x = griffin_lim(mag, cfg, iterations, seed=seed)
    return Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate_hz)
