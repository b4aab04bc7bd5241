"""Toy multi-speaker corpus synthesis, JSON-lines manifests, SNR filtering, whisper augmentation.

The synthetic voice is a classic source-filter model: a pulse train (or noise)
excitation shaped by a speaker-specific spectral tilt, passed through a cascade
of four time-varying formant resonators. Content (the segment sequence of a
``text_id``), prosody (the f0 contour) and identity (the speaker filter and f0
range) are independent factors.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal
from scipy.stats import qmc

from .audio import Waveform, estimate_snr, load_wav, save_wav, whisperize

SAMPLE_RATE = 24000

# (F1, F2, F3, F4) in Hz
VOWELS = [
    (280, 2250, 2900, 3700),
    (400, 1900, 2550, 3600),
    (550, 1770, 2490, 3550),
    (690, 1660, 2490, 3500),
    (750, 1200, 2500, 3500),
    (590, 880, 2540, 3400),
    (450, 800, 2600, 3400),
    (450, 1030, 2380, 3450),
    (310, 870, 2250, 3400),
    (620, 1190, 2390, 3500),
    (500, 1500, 2500, 3550),
    (350, 1650, 2700, 3650),
]
# noise targets: (centre Hz, bandwidth Hz); None marks aspiration through the vowel tract
FRICATIVES = [(6200.0, 2400.0), (3300.0, 1400.0), (None, None), (5000.0, 6000.0)]
N_TARGETS = len(VOWELS) + len(FRICATIVES)
FORMANT_BW = (80.0, 100.0, 150.0, 200.0)
REF_FORMANTS = np.array([500.0, 1500.0, 2500.0, 3500.0])


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass(frozen=True)
class SynthSpeakerSpec:
    speaker_id: str
    formant_shifts: tuple[float, float, float, float]
    f0_base: float
    f0_range: float
    spectral_tilt_db_per_oct: float
    seed: int

    def __post_init__(self):
        if not 70.0 <= self.f0_base <= 320.0:
            raise ValueError(f"f0_base {self.f0_base} outside [70, 320]")
        if len(self.formant_shifts) != 4:
            raise ValueError("formant_shifts needs 4 values")


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    path: str
    duration_s: float
    domain: str = "voiced"
    snr_db: float | None = None
    text_id: str = ""

    def __post_init__(self):
        if self.domain not in ("voiced", "whispered"):
            raise ValueError(f"domain must be 'voiced' or 'whispered', got {self.domain!r}")
        if not self.duration_s > 0:
            raise ValueError(f"{self.utt_id}: duration must be positive")


Manifest = list  # list[UtteranceRecord]


# ---------------------------------------------------------------------------
# manifests


def write_manifest(records: Iterable[UtteranceRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[UtteranceRecord]:
    path = Path(path)
    records = []
    seen = set()
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            r = UtteranceRecord(**json.loads(line))
            if r.utt_id in seen:
                raise ValueError(f"duplicate utt_id {r.utt_id} in {path}")
            seen.add(r.utt_id)
            if not Path(r.path).is_absolute():
                r = replace(r, path=str(path.parent / r.path))
            records.append(r)
    return records


def load_record(r: UtteranceRecord) -> Waveform:
    return load_wav(r.path)


# ---------------------------------------------------------------------------
# speakers and text plans


def make_speakers(n: int, seed: int, prefix: str = "spk") -> list[SynthSpeakerSpec]:
    """``n`` speakers spread over voice space by a scrambled Halton sequence.

    Dimensions: log-f0 in [85, 270] Hz, vocal-tract scale, spectral tilt and
    intonation range. Low-discrepancy placement keeps toy speakers well
    separated; formant offsets get a small independent jitter.
    """
    pts = qmc.Halton(d=4, scramble=True, seed=derive_seed(seed, "halton") % (2**32)).random(n)
    speakers = []
    for i, u in enumerate(pts):
        speaker_id = f"{prefix}{i}"
        rng = np.random.default_rng(derive_seed(seed, "speaker", speaker_id))
        f0 = math.exp(math.log(85.0) + u[0] * (math.log(270.0) - math.log(85.0)))
        tract = 0.86 + 0.30 * u[1]
        shifts = (tract - 1.0) * REF_FORMANTS + rng.uniform(-30, 30, size=4)
        speakers.append(SynthSpeakerSpec(
            speaker_id=speaker_id,
            formant_shifts=tuple(round(float(v), 3) for v in shifts),
            f0_base=round(f0, 3),
            f0_range=round((0.05 + 0.07 * float(u[3])) * f0, 3),
            spectral_tilt_db_per_oct=round(-15.0 + 9.0 * float(u[2]), 3),
            seed=derive_seed(seed, "speaker-seed", speaker_id) % (2**31),
        ))
    return speakers


@dataclass(frozen=True)
class Segment:
    target: int        # index into VOWELS + FRICATIVES
    start_s: float
    dur_s: float

    @property
    def voiced(self) -> bool:
        return self.target < len(VOWELS)

    @property
    def end_s(self) -> float:
        return self.start_s + self.dur_s


def text_plan(seed: int, text_id: str) -> tuple[list[Segment], float]:
    """Segment sequence and total duration for a text; independent of the speaker."""
    rng = np.random.default_rng(derive_seed(seed, "text", text_id))
    total = round(float(rng.uniform(1.0, 6.0)), 2)
    edges = 0.2
    n_max = int(min(12, math.floor((total - edges) / 0.08)))
    n = int(rng.integers(5, n_max + 1))
    kinds = []
    for _ in range(n):
        if rng.random() < 0.75 or (kinds and kinds[-1] >= len(VOWELS)):
            kinds.append(int(rng.integers(0, len(VOWELS))))
        else:
            kinds.append(len(VOWELS) + int(rng.integers(0, len(FRICATIVES))))
    durs = rng.uniform(0.08, 0.30, size=n)
    budget = total - edges
    if durs.sum() > budget:
        durs = 0.08 + (durs - 0.08) * (budget - 0.08 * n) / (durs.sum() - 0.08 * n)
    gaps = rng.dirichlet(np.ones(n + 1)) * (budget - durs.sum())
    gaps[0] += edges / 2
    gaps[-1] += edges / 2
    # mostly continuous speech: shrink interior pauses, move the rest to the edges
    interior = gaps[1:-1] * 0.5
    moved = gaps[1:-1].sum() - interior.sum()
    gaps[0] += moved / 2
    gaps[-1] += moved / 2
    gaps[1:-1] = interior
    segs = []
    t = gaps[0]
    for i in range(n):
        segs.append(Segment(kinds[i], float(t), float(durs[i])))
        t += durs[i] + gaps[i + 1]
    return segs, total


# ---------------------------------------------------------------------------
# synthesis


def _ramp_envelope(n: int, segs: list[Segment], sr: int, voiced: bool | None, ramp_s=0.015) -> np.ndarray:
    env = np.zeros(n)
    r = int(ramp_s * sr)
    for s in segs:
        if voiced is not None and s.voiced != voiced:
            continue
        a, b = int(round(s.start_s * sr)), min(n, int(round(s.end_s * sr)))
        if b <= a:
            continue
        seg = np.ones(b - a)
        k = min(r, (b - a) // 2)
        if k > 0:
            ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, k))
            seg[:k] = ramp
            seg[-k:] = ramp[::-1]
        env[a:b] = np.maximum(env[a:b], seg)
    return env


def _formant_tracks(n: int, segs: list[Segment], spk: SynthSpeakerSpec, sr: int) -> np.ndarray:
    """Per-sample (n, 4) formant frequencies with 30 ms transitions between targets."""
    shifts = np.asarray(spk.formant_shifts)
    neutral = np.array(VOWELS[10], dtype=float)
    times, values = [0.0], [neutral + shifts]
    for s in segs:
        tgt = np.array(VOWELS[s.target] if s.voiced else neutral, dtype=float) + shifts
        edge = min(0.03, s.dur_s / 3)
        times += [s.start_s + edge, s.end_s - edge]
        values += [tgt, tgt]
    times.append(n / sr)
    values.append(values[-1])
    t = np.arange(n) / sr
    values = np.array(values)
    return np.stack([np.interp(t, times, values[:, k]) for k in range(4)], axis=1)


def _f0_contour(n: int, spk: SynthSpeakerSpec, rng: np.random.Generator, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    dur = n / sr
    curve = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.5)
        curve += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    curve /= max(np.max(np.abs(curve)), 1e-9)
    declination = 0.3 * (0.5 - t / dur)
    return spk.f0_base + spk.f0_range * np.clip(curve * 0.7 + declination, -1, 1)


def _pulse_train(f0: np.ndarray, sr: int) -> np.ndarray:
    phase = np.cumsum(f0 / sr)
    cycles = np.floor(phase)
    pulses = np.zeros_like(f0)
    idx = np.nonzero(np.diff(cycles, prepend=cycles[0] - 1) > 0)[0]
    pulses[idx] = 1.0
    return pulses


def _apply_tilt(x: np.ndarray, tilt_db_per_oct: float, sr: int, corner_hz: float = 200.0) -> np.ndarray:
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.shape[0], 1.0 / sr)
    octaves = np.log2(np.maximum(f, corner_hz) / corner_hz)
    gain = 10 ** (tilt_db_per_oct * octaves / 20)
    return np.fft.irfft(spec * gain, n=x.shape[0])


def _resonator_cascade(x: np.ndarray, tracks: np.ndarray, sr: int, block: int = 120) -> np.ndarray:
    y = x
    for k in range(4):
        r = math.exp(-math.pi * FORMANT_BW[k] / sr)
        out = np.empty_like(y)
        y1 = y2 = 0.0
        for start in range(0, y.shape[0], block):
            stop = min(start + block, y.shape[0])
            fk = min(tracks[start, k], 0.45 * sr)
            b_ = 2 * r * math.cos(2 * math.pi * fk / sr)
            c_ = -r * r
            a_ = 1 - b_ - c_
            zi = [b_ * y1 + c_ * y2, c_ * y1]
            seg, _ = signal.lfilter([a_], [1.0, -b_, -c_], y[start:stop], zi=zi)
            out[start:stop] = seg
            y1 = seg[-1]
            y2 = seg[-2] if seg.shape[0] > 1 else y1
        y = out
    return y


def synthesize(spk: SynthSpeakerSpec, segs: list[Segment], total_s: float, seed: int,
               sr: int = SAMPLE_RATE, noise_snr_db: float | None = None) -> Waveform:
    """Render a segment plan with a speaker's voice."""
    rng = np.random.default_rng(seed)
    n = int(round(total_s * sr))
    f0 = _f0_contour(n, spk, rng, sr)
    voiced_env = _ramp_envelope(n, segs, sr, voiced=True)
    asp_segs = [s for s in segs if not s.voiced and FRICATIVES[s.target - len(VOWELS)][0] is None]
    asp_env = _ramp_envelope(n, asp_segs, sr, voiced=None)

    source = _apply_tilt(_pulse_train(f0, sr), spk.spectral_tilt_db_per_oct, sr)
    source *= np.sqrt(f0 / 120.0)  # keep loudness roughly f0-independent
    aspiration = rng.standard_normal(n) * 0.02
    excitation = source * voiced_env + aspiration * asp_env
    x = _resonator_cascade(excitation, _formant_tracks(n, segs, spk, sr), sr)

    shift = spk.formant_shifts[3]
    for s in segs:
        if s.voiced:
            continue
        centre, bw = FRICATIVES[s.target - len(VOWELS)]
        if centre is None:
            continue
        env = _ramp_envelope(n, [s], sr, voiced=None)
        a, b = np.nonzero(env)[0][[0, -1]]
        lo = max(200.0, centre + shift - bw / 2)
        hi = min(0.45 * sr, centre + shift + bw / 2)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        noise = signal.sosfilt(sos, rng.standard_normal(b - a + 1))
        x[a:b + 1] += noise * env[a:b + 1] * 0.35 * np.std(x[voiced_env > 0.5]) / max(np.std(noise), 1e-9)

    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.5 / peak)
    if noise_snr_db is not None:
        active = (voiced_env + _ramp_envelope(n, segs, sr, voiced=False)) > 0.5
        p_sig = np.mean(x[active] ** 2) if active.any() else np.mean(x ** 2)
        x = x + rng.standard_normal(n) * math.sqrt(p_sig / 10 ** (noise_snr_db / 10))
        x = x * (0.5 / max(np.max(np.abs(x)), 1e-9))
    return Waveform(x, sr)


def synthesize_vowel(f0: float = 120.0, duration_s: float = 1.0, vowel: int = 4,
                     sr: int = SAMPLE_RATE, tilt_db_per_oct: float = -12.0,
                     formant_shifts=(0.0, 0.0, 0.0, 0.0), pad_s: float = 0.0) -> Waveform:
    """Steady pulse-excited vowel at a constant f0 (test fixture helper)."""
    n = int(round(duration_s * sr))
    pulses = _pulse_train(np.full(n, float(f0)), sr)
    src = _apply_tilt(pulses, tilt_db_per_oct, sr)
    tracks = np.tile(np.array(VOWELS[vowel], dtype=float) + np.asarray(formant_shifts), (n, 1))
    x = _resonator_cascade(src, tracks, sr)
    k = int(0.01 * sr)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, k))
    x[:k] *= ramp
    x[-k:] *= ramp[::-1]
    x *= 0.5 / np.max(np.abs(x))
    pad = int(round(pad_s * sr))
    return Waveform(np.pad(x, (pad, pad)), sr)


# ---------------------------------------------------------------------------
# corpus operations


def _render_record(args) -> tuple[UtteranceRecord, Waveform]:
    spk, utt_id, text_id, seed, noisy_snr, out_dir = args
    segs, total = text_plan(seed, text_id)
    w = synthesize(spk, segs, total, derive_seed(seed, "utt", utt_id), noise_snr_db=noisy_snr)
    rel = f"wavs/{utt_id}.wav"
    save_wav(out_dir / rel, w)
    return UtteranceRecord(utt_id=utt_id, speaker_id=spk.speaker_id, path=rel,
                           duration_s=round(w.duration_s, 6), domain="voiced", text_id=text_id), w


def generate_toy_corpus(n_speakers: int, utts_per_speaker: int, seed: int, out_dir,
                        noisy_fraction: float = 0.1, workers: int = 1,
                        speaker_prefix: str = "spk") -> list[UtteranceRecord]:
    """Write ``n_speakers * utts_per_speaker`` WAV files plus ``manifest.jsonl`` and ``speakers.json``.

    Texts are drawn from a shared pool so different speakers utter the same
    ``text_id`` (parallel content). A ``noisy_fraction`` of utterances gets
    additive background noise at 0-8 dB SNR so that SNR filtering has work to do.
    """
    if n_speakers < 2 or utts_per_speaker < 2:
        raise ValueError("need n_speakers >= 2 and utts_per_speaker >= 2")
    out_dir = Path(out_dir)
    try:
        (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir}") from exc
    pool = 2 * utts_per_speaker
    jobs = []
    speakers = []
    for spk in make_speakers(n_speakers, seed, speaker_prefix):
        speakers.append(spk)
        for j in range(utts_per_speaker):
            utt_id = f"{spk.speaker_id}_{j:03d}"
            rng = np.random.default_rng(derive_seed(seed, "assign", utt_id))
            text_id = f"t{int(rng.integers(0, pool)):04d}"
            noisy = float(rng.uniform(0.0, 8.0)) if rng.random() < noisy_fraction else None
            jobs.append((spk, utt_id, text_id, seed, noisy, out_dir))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(_render_record, jobs))
    else:
        results = [_render_record(j) for j in jobs]
    records = [r for r, _ in results]
    write_manifest(records, out_dir / "manifest.jsonl")
    with open(out_dir / "speakers.json", "w") as f:
        json.dump([asdict(s) for s in speakers], f, indent=1, sort_keys=True)
    return read_manifest(out_dir / "manifest.jsonl")


def annotate_snr(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    return [replace(r, snr_db=round(estimate_snr(load_record(r)), 4)) for r in records]


def filter_manifest(records: list[UtteranceRecord], min_snr_db: float = 10.0,
                    min_duration_s: float = 1.0) -> list[UtteranceRecord]:
    """Keep records with snr_db >= min_snr_db and duration_s >= min_duration_s, order preserved."""
    out = []
    for r in records:
        if r.snr_db is None:
            raise ValueError(f"missing snr_db for {r.utt_id}; run estimate_snr first")
        if r.snr_db >= min_snr_db and r.duration_s >= min_duration_s:
            out.append(r)
    return out


def whisper_augment(records: list[UtteranceRecord], out_dir, seed: int = 0,
                    workers: int = 1) -> list[UtteranceRecord]:
    """Whisperized copies of voiced records; ``<utt_id>_whisp`` keeps the pairing."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    for r in records:
        if r.domain != "voiced":
            raise ValueError(f"record {r.utt_id} is already whispered")

    def one(r: UtteranceRecord) -> UtteranceRecord:
        w = whisperize(load_record(r), seed=derive_seed(seed, "whisper", r.utt_id) % (2**32))
        utt_id = f"{r.utt_id}_whisp"
        rel = f"wavs/{utt_id}.wav"
        save_wav(out_dir / rel, w)
        return replace(r, utt_id=utt_id, path=str(out_dir / rel), domain="whispered",
                       duration_s=round(w.duration_s, 6))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            whispered = list(ex.map(one, records))
    else:
        whispered = [one(r) for r in records]
    write_manifest([replace(r, path=str(Path(r.path).relative_to(out_dir))) for r in whispered],
                   out_dir / "manifest.jsonl")
    return whispered
