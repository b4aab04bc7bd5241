"""Verification protocols, trial scoring, EER/DET metrics and similarity reports."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, load_wav, save_wav
from .data import UtteranceRecord, derive_seed
from .nn_utils import state_hash
from .speaker import SpeakerEncoder, cosine, embed

KINDS = ("w2s_same", "w2s_cross", "s2s_cross", "sim_cross_sentence", "sim_cross_speaker")
GT_KINDS = ("gt_speech", "gt_whisper")
SIM_MIN_S, SIM_MAX_S = 4.0, 10.0
REF_CROP_S = 3.0


@dataclass(frozen=True)
class Trial:
    enroll: str          # path of voiced original audio
    test: str            # converted file (relative to the converted dir) or original audio path
    label: str

    def __post_init__(self):
        if self.label not in ("target", "nontarget"):
            raise ValueError(f"label must be target or nontarget, got {self.label!r}")
        if self.enroll == self.test:
            raise ValueError(f"trial pairs {self.enroll} with itself")


@dataclass(frozen=True)
class ConversionJob:
    test_id: str
    source: str
    reference: str
    ref_start_s: float
    ref_dur_s: float
    target_speaker: str
    source_speaker: str

    @property
    def output(self) -> str:
        return f"{self.test_id}.wav"


@dataclass
class Protocol:
    kind: str
    trials: list[Trial]
    jobs: list[ConversionJob] = field(default_factory=list)
    seed: int = 0

    @property
    def counts(self) -> dict:
        n_t = sum(t.label == "target" for t in self.trials)
        return {"n_target": n_t, "n_nontarget": len(self.trials) - n_t, "n_conversions": len(self.jobs)}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for t in self.trials:
                f.write(f"{t.enroll} {t.test} {t.label}\n")
        with open(jobs_path(path), "w") as f:
            f.write(json.dumps({"kind": self.kind, "seed": self.seed}) + "\n")
            for j in self.jobs:
                f.write(json.dumps(asdict(j), sort_keys=True) + "\n")


def jobs_path(protocol_path) -> Path:
    p = Path(protocol_path)
    return p.with_name(p.stem + ".jobs.jsonl")


def read_trials(path) -> list[Trial]:
    trials = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected '<enroll> <test> <target|nontarget>'")
            trials.append(Trial(*parts))
    return trials


def read_protocol(path) -> Protocol:
    trials = read_trials(path)
    jp = jobs_path(path)
    kind, seed, jobs = "unknown", 0, []
    if jp.exists():
        lines = [json.loads(x) for x in jp.read_text().splitlines() if x.strip()]
        kind, seed = lines[0]["kind"], lines[0]["seed"]
        jobs = [ConversionJob(**d) for d in lines[1:]]
    return Protocol(kind, trials, jobs, seed)


# ---------------------------------------------------------------------------
# protocol construction


def _by_speaker(records: list[UtteranceRecord]) -> dict[str, list[UtteranceRecord]]:
    groups = defaultdict(list)
    for r in records:
        groups[r.speaker_id].append(r)
    return {s: sorted(v, key=lambda r: r.utt_id) for s, v in sorted(groups.items())}


def _ref_crop(r: UtteranceRecord, rng: np.random.Generator) -> tuple[float, float]:
    if r.duration_s <= REF_CROP_S:
        return 0.0, r.duration_s
    return round(float(rng.uniform(0.0, r.duration_s - REF_CROP_S)), 3), REF_CROP_S


def _sibling_id(r: UtteranceRecord) -> str:
    return r.utt_id.removesuffix("_whisp")


def build_protocol(voiced: list[UtteranceRecord], kind: str, seed: int = 0,
                   whispered: list[UtteranceRecord] | None = None, n_targets: int = 2,
                   n_nontarget: int = 3, max_sources: int | None = None) -> Protocol:
    """Trials and the conversions they need.

    Every speaker gets one fixed voiced enrollment utterance; it is never used
    as a conversion source or reference. Cross kinds convert each source toward
    ``n_targets`` other speakers; every conversion gets one target trial
    against its target speaker's enrollment and ``n_nontarget`` nontarget
    trials against enrollments of other speakers.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown protocol kind {kind!r}; expected one of {KINDS}")
    if any(r.domain != "voiced" for r in voiced):
        raise ValueError("enrollment manifest must contain voiced records only")
    groups = _by_speaker(voiced)
    if len(groups) < 2:
        raise ValueError("protocol needs at least 2 speakers")
    if kind.startswith("w2s"):
        if not whispered or any(r.domain != "whispered" for r in whispered):
            raise ValueError(f"{kind} requires a whispered-domain manifest")
    rng = np.random.default_rng(derive_seed(seed, "protocol", kind))
    speakers = list(groups)
    enroll = {}
    for s in speakers:
        if len(groups[s]) < 2 and not kind.startswith("sim"):
            raise ValueError(f"speaker {s} needs at least 2 voiced utterances")
        enroll[s] = groups[s][int(rng.integers(len(groups[s])))]

    if kind.startswith("sim"):
        return _sim_protocol(voiced, kind, groups, rng, seed, max_sources)

    if kind.startswith("w2s"):
        sources = sorted(whispered, key=lambda r: r.utt_id)
    else:
        sources = [r for s in speakers for r in groups[s]]
    sources = [r for r in sources if _sibling_id(r) != enroll[r.speaker_id].utt_id]
    if max_sources is not None and len(sources) > max_sources:
        pick = np.sort(rng.choice(len(sources), max_sources, replace=False))
        sources = [sources[i] for i in pick]

    trials, jobs = [], []
    for src in sources:
        a = src.speaker_id
        if a not in groups:
            raise ValueError(f"whispered source {src.utt_id} has no voiced speaker {a}")
        if kind == "w2s_same":
            targets = [a]
        else:
            others = [s for s in speakers if s != a]
            targets = [others[i] for i in rng.choice(len(others), min(n_targets, len(others)), replace=False)]
        for b in targets:
            pool = [r for r in groups[b] if r.utt_id not in (enroll[b].utt_id, _sibling_id(src))]
            if not pool:
                raise ValueError(f"speaker {b} has no reference utterance besides the enrollment")
            ref = pool[int(rng.integers(len(pool)))]
            start, dur = _ref_crop(ref, rng)
            job = ConversionJob(f"{kind}_{src.utt_id}_to_{b}", src.path, ref.path, start, dur, b, a)
            jobs.append(job)
            trials.append(Trial(enroll[b].path, job.output, "target"))
            others = [s for s in speakers if s != b]
            for c in rng.choice(len(others), min(n_nontarget, len(others)), replace=False):
                trials.append(Trial(enroll[others[c]].path, job.output, "nontarget"))
    return Protocol(kind, trials, jobs, seed)


def in_sim_range(duration_s: float) -> bool:
    return SIM_MIN_S <= duration_s <= SIM_MAX_S


def _sim_protocol(voiced, kind, groups, rng, seed, max_sources) -> Protocol:
    """Similarity of conversions against original audio.

    cross_sentence: the source is converted with a 3 s clip from another
    utterance of its own speaker and compared with the source original.
    cross_speaker: the clip comes from a random utterance of another speaker
    and the conversion is compared with that utterance.
    """
    speakers = list(groups)
    sources = [r for r in voiced if in_sim_range(r.duration_s)]
    sources.sort(key=lambda r: r.utt_id)
    if max_sources is not None and len(sources) > max_sources:
        pick = np.sort(rng.choice(len(sources), max_sources, replace=False))
        sources = [sources[i] for i in pick]
    trials, jobs = [], []
    for src in sources:
        a = src.speaker_id
        if kind == "sim_cross_sentence":
            pool = [r for r in groups[a] if r.utt_id != src.utt_id]
            if not pool:
                continue
            b = a
        else:
            others = [s for s in speakers if s != a]
            b = others[int(rng.integers(len(others)))]
            pool = groups[b]
        ref = pool[int(rng.integers(len(pool)))]
        start, dur = _ref_crop(ref, rng)
        job = ConversionJob(f"{kind}_{src.utt_id}_to_{b}", src.path, ref.path, start, dur, b, a)
        jobs.append(job)
        original = src if kind == "sim_cross_sentence" else ref
        trials.append(Trial(original.path, job.output, "target"))
    return Protocol(kind, trials, jobs, seed)


def ground_truth_protocol(voiced: list[UtteranceRecord], kind: str, seed: int = 0,
                          whispered: list[UtteranceRecord] | None = None, n_nontarget: int = 3) -> Protocol:
    """No-conversion trials: voiced enrollments against original voiced or whispered test audio."""
    if kind not in GT_KINDS:
        raise ValueError(f"unknown ground-truth kind {kind!r}")
    groups = _by_speaker(voiced)
    if len(groups) < 2:
        raise ValueError("protocol needs at least 2 speakers")
    rng = np.random.default_rng(derive_seed(seed, "protocol", kind))
    speakers = list(groups)
    enroll = {s: groups[s][int(rng.integers(len(groups[s])))] for s in speakers}
    if kind == "gt_whisper":
        if not whispered:
            raise ValueError("gt_whisper requires a whispered-domain manifest")
        tests = sorted(whispered, key=lambda r: r.utt_id)
    else:
        tests = [r for s in speakers for r in groups[s]]
    trials = []
    for r in tests:
        if _sibling_id(r) == enroll[r.speaker_id].utt_id:
            continue
        trials.append(Trial(enroll[r.speaker_id].path, r.path, "target"))
        others = [s for s in speakers if s != r.speaker_id]
        for c in rng.choice(len(others), min(n_nontarget, len(others)), replace=False):
            trials.append(Trial(enroll[others[c]].path, r.path, "nontarget"))
    return Protocol(kind, trials, [], seed)


# ---------------------------------------------------------------------------
# conversion and scoring


def load_reference(job: ConversionJob) -> Waveform:
    w = load_wav(job.reference)
    a = int(round(job.ref_start_s * w.sample_rate_hz))
    b = min(len(w), a + int(round(job.ref_dur_s * w.sample_rate_hz)))
    return Waveform(w.samples[a:b], w.sample_rate_hz)


def run_conversions(protocol: Protocol, system, out_dir, gl_iterations: int = 32) -> list[Path]:
    from .decoders import convert

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for job in protocol.jobs:
        out = convert(load_wav(job.source), load_reference(job), system, gl_iterations=gl_iterations)
        path = out_dir / job.output
        save_wav(path, out)
        written.append(path)
    return written


def _resolve(path: str, converted_dir) -> Path:
    p = Path(path)
    if p.is_absolute() or converted_dir is None:
        return p
    return Path(converted_dir) / p


def score_trials(trials, converted_dir, spk_encoder: SpeakerEncoder) -> np.ndarray:
    """Cosine similarity of speaker embeddings per trial, in protocol order."""
    trials = trials.trials if isinstance(trials, Protocol) else trials
    cache: dict[Path, np.ndarray] = {}

    def emb(path: Path) -> np.ndarray:
        if path not in cache:
            cache[path] = embed(load_wav(path), spk_encoder)
        return cache[path]

    scores = np.empty(len(trials))
    for i, t in enumerate(trials):
        try:
            scores[i] = cosine(emb(_resolve(t.enroll, converted_dir)), emb(_resolve(t.test, converted_dir)))
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise ValueError(f"trial {i}: {exc}") from exc
    return scores


def speaker_similarity(converted: Waveform, original: Waveform, spk_encoder: SpeakerEncoder) -> float:
    return cosine(embed(converted, spk_encoder), embed(original, spk_encoder))


def write_scores(path, scores) -> None:
    Path(path).write_text("".join(f"{float(s):.10f}\n" for s in scores))


def read_scores(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])


# ---------------------------------------------------------------------------
# metrics


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([lab == "target" if isinstance(lab, str) else bool(lab) for lab in labels])
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("need at least one target and one nontarget score")
    return s, y


def det_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, FAR, FRR) at every distinct score plus +inf; a trial is accepted when score >= threshold."""
    s, y = _check(scores, labels)
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    n_t, n_n = int(y.sum()), int((~y).sum())
    thresholds, first = np.unique(s, return_index=True)
    # scores strictly below threshold i are the first `first[i]` sorted entries
    tgt_below = np.concatenate([[0], np.cumsum(y)])[first]
    non_below = np.concatenate([[0], np.cumsum(~y)])[first]
    points = [(float(t), (n_n - nb) / n_n, tb / n_t) for t, tb, nb in zip(thresholds, tgt_below, non_below)]
    points.append((math.inf, 0.0, 1.0))
    return points


def compute_eer(scores, labels) -> tuple[float, float]:
    """EER where the piecewise-linear (FAR, FRR) curve crosses FAR == FRR, and the matching threshold."""
    points = det_points(scores, labels)
    prev = points[0]
    for cur in points:
        d = cur[1] - cur[2]
        if d <= 0:
            if cur is points[0] or d == 0:
                thr = cur[0] if math.isfinite(cur[0]) else prev[0]
                return float(cur[1]), float(thr)
            d0 = prev[1] - prev[2]
            a = d0 / (d0 - d)
            eer = prev[1] + a * (cur[1] - prev[1])
            thr = prev[0] + a * (cur[0] - prev[0]) if math.isfinite(cur[0]) else prev[0]
            return float(eer), float(thr)
        prev = cur
    raise AssertionError("DET curve never crosses the diagonal")


def backend_id(spk_encoder: SpeakerEncoder) -> str:
    return f"speakervc-tdnn-{state_hash(spk_encoder)[:16]}"


def make_report(kind: str, scores, labels, backend: str, extra: dict | None = None) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([lab == "target" for lab in labels])
    report = {"backend": backend, "kind": kind, "n_target": int(y.sum()), "n_nontarget": int((~y).sum())}
    if y.any():
        report["mean_target"] = float(s[y].mean())
    if (~y).any():
        report["mean_nontarget"] = float(s[~y].mean())
    if y.any() and (~y).any():
        eer, thr = compute_eer(s, labels)
        report.update(eer=eer, threshold=thr)
    else:
        report["mean_similarity"] = float(s.mean())
    if extra:
        report.update(extra)
    return report


def measure_rtf(total_audio_s: float, total_compute_s: float) -> float:
    if total_audio_s <= 0:
        raise ValueError("audio duration must be positive")
    if total_compute_s <= 0:
        raise ValueError("compute time must be positive")
    return total_compute_s / total_audio_s
