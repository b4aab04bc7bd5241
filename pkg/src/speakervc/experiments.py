"""Desk-scale ablation grid: decoder variants, speaker loss, speaker embedding and speaker-count scaling."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adaptor import MelAdaptor, train_mel_adaptor
from .data import annotate_snr, filter_manifest, generate_toy_corpus, read_manifest, whisper_augment, load_record
from .decoders import DecoderItem, DecoderModel, TrainPlan, VCSystem, prepare_items, train_stage
from .evaluation import GT_KINDS, Protocol, backend_id, build_protocol, ground_truth_protocol, \
    make_report, measure_rtf, run_conversions, score_trials
from .nn_utils import seeded, state_hash
from .speaker import SpeakerEncoder, train_speaker_encoder
from .units import UnitCodebook, UnitProjection, assign_units, extract_frontend, fit_kmeans, train_unit_projection

logger = logging.getLogger(__name__)

EVAL_KINDS = ("w2s_same", "w2s_cross", "s2s_cross")
ENTRY_POINTS = ("__init__", "__main__", "cli", "config", "plots")   # not on the ablation path


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int
    utts_per_speaker: int
    seed: int
    prefix: str
    noisy_fraction: float = 0.1


@dataclass
class AblationConfig:
    work_dir: str
    base: CorpusSpec = CorpusSpec(20, 10, 7, "spk")
    ext: CorpusSpec = CorpusSpec(60, 3, 8, "ext")
    eval: CorpusSpec = CorpusSpec(10, 6, 99, "evs", noisy_fraction=0.0)
    seed: int = 0
    k: int = 64
    projection_epochs: int = 20
    speaker_epochs: int = 30
    adaptor_epochs: int = 20
    stage1_epochs: int = 40
    stage2_epochs: int = 20
    stage3_epochs: int = 10
    sl_weight: float = 1.0
    n_targets: int = 2
    n_nontarget: int = 5
    gl_iterations: int = 32
    min_snr_db: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Shared:
    codebook: UnitCodebook
    projection: UnitProjection
    spk_encoder: SpeakerEncoder
    adaptor: MelAdaptor


@dataclass
class TrainingSet:
    voiced: list
    whispered: list
    items: list[DecoderItem] = field(default_factory=list)


def make_corpus(spec: CorpusSpec, out_dir: Path, whisper: bool = True) -> tuple[list, list]:
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists():
        voiced = read_manifest(manifest)
    else:
        voiced = generate_toy_corpus(spec.n_speakers, spec.utts_per_speaker, spec.seed, out_dir,
                                     noisy_fraction=spec.noisy_fraction, speaker_prefix=spec.prefix)
    whispered = []
    if whisper:
        wdir = out_dir.with_name(out_dir.name + "_whisper")
        wman = wdir / "manifest.jsonl"
        whispered = read_manifest(wman) if wman.exists() else whisper_augment(voiced, wdir, seed=spec.seed)
    return voiced, whispered


def filtered(voiced: list, whispered: list, min_snr_db: float) -> tuple[list, list]:
    kept = filter_manifest(annotate_snr(voiced), min_snr_db=min_snr_db)
    ids = {r.utt_id for r in kept}
    return kept, [r for r in whispered if r.utt_id.removesuffix("_whisp") in ids]


def train_shared(voiced: list, whispered: list, cfg: AblationConfig) -> Shared:
    """Content units, speaker encoder and mel adaptor, all from the BASE training set."""
    feats = [extract_frontend(load_record(r)) for r in voiced + whispered]
    codebook = fit_kmeans(feats, cfg.k, cfg.seed)
    units = [assign_units(f, codebook) for f in feats]
    projection = train_unit_projection(feats, units, cfg.projection_epochs, cfg.seed, k=cfg.k)
    spk = train_speaker_encoder(voiced, cfg.speaker_epochs, cfg.seed)
    adaptor = train_mel_adaptor(voiced, epochs=cfg.adaptor_epochs, seed=cfg.seed)
    return Shared(codebook, projection, spk, adaptor)


def train_decoder(variant: str, use_spk: bool, items: list[DecoderItem], shared: Shared, cfg: AblationConfig,
                  stages=(1, 2)) -> DecoderModel:
    with seeded(cfg.seed):
        model = DecoderModel(variant, k=cfg.k, use_spk=use_spk)
    return continue_training(model, items, shared, cfg, stages)


def continue_training(model: DecoderModel, items, shared: Shared, cfg: AblationConfig, stages) -> DecoderModel:
    epochs = {1: cfg.stage1_epochs, 2: cfg.stage2_epochs, 3: cfg.stage3_epochs}
    for stage in stages:
        plan = TrainPlan(stage, epochs[stage], cfg.seed, sl_weight=cfg.sl_weight)
        train_stage(model, plan, items, shared.adaptor, shared.spk_encoder)
    return model


def save_system(ckpt_dir: Path, system: VCSystem) -> None:
    from .checkpoint import decoder_key, save_component

    for name, obj in (("codebook", system.codebook), ("projection", system.projection),
                      ("speaker", system.spk_encoder), ("adaptor", system.adaptor)):
        save_component(ckpt_dir, name, obj)
    save_component(ckpt_dir, decoder_key(system.decoder.variant, system.decoder.use_spk), system.decoder)


def protocol_digest(p: Protocol) -> str:
    h = hashlib.sha256(p.kind.encode())
    for t in p.trials:
        h.update(f"{t.enroll} {t.test} {t.label}\n".encode())
    for j in p.jobs:
        h.update(json.dumps(asdict(j), sort_keys=True).encode())
    return h.hexdigest()


def evaluate(system: VCSystem, protocols: dict[str, Protocol], out_dir: Path, gl_iterations: int = 32) -> dict:
    reports = {}
    backend = backend_id(system.spk_encoder)
    for kind, p in protocols.items():
        conv_dir = out_dir / kind
        t0 = time.perf_counter()
        run_conversions(p, system, conv_dir, gl_iterations)
        compute_s = time.perf_counter() - t0
        audio_s = sum(_duration(conv_dir / j.output) for j in p.jobs)
        scores = score_trials(p, conv_dir, system.spk_encoder)
        labels = [t.label for t in p.trials]
        reports[kind] = make_report(kind, scores, labels, backend,
                                    {"protocol_sha256": protocol_digest(p), **p.counts})
        reports[kind]["wallclock"] = {"rtf": measure_rtf(audio_s, compute_s), "compute_s": compute_s}
    return reports


def _duration(path: Path) -> float:
    from .audio import load_wav
    return load_wav(path).duration_s


def ground_truth_rows(voiced, whispered, spk: SpeakerEncoder, seed: int, n_nontarget: int) -> dict:
    rows = {}
    for kind in GT_KINDS:
        p = ground_truth_protocol(voiced, kind, seed, whispered, n_nontarget=n_nontarget)
        s = score_trials(p, None, spk)
        rows[kind] = make_report(kind, s, [t.label for t in p.trials], backend_id(spk))
    return rows


ROWS = (
    ("fastspeech", "FastSpeech-based"),
    ("fastspeech_sl", "+ SL"),
    ("fastspeech_sl_ext", "+ SL + EXT"),
    ("speakervc", "SpeakerVC"),
    ("speakervc_emb", "+ Spk. Emb."),
    ("speakervc_emb_sl", "+ Spk. Emb. + SL"),
    ("speakervc_emb_sl_ext", "+ Spk. Emb. + SL + EXT"),
)


def check_orderings(rows: dict) -> dict:
    def eer(row, kind):
        return rows[row][kind]["eer"]

    checks = {}
    for base, sl in (("fastspeech", "fastspeech_sl"), ("speakervc_emb", "speakervc_emb_sl")):
        b, s = eer(base, "s2s_cross"), eer(sl, "s2s_cross")
        checks[f"sl_reduces_eer_20pct[{base}]"] = s <= 0.8 * b
        checks[f"sl_lowers_eer_all[{base}]"] = all(eer(sl, k) < eer(base, k) for k in EVAL_KINDS)
    checks["spk_emb_lowers_eer_all"] = all(eer("speakervc_emb", k) < eer("speakervc", k) for k in EVAL_KINDS)
    for sl, ext in (("fastspeech_sl", "fastspeech_sl_ext"), ("speakervc_emb_sl", "speakervc_emb_sl_ext")):
        checks[f"ext_no_worse[{sl}]"] = eer(ext, "s2s_cross") <= 1.1 * eer(sl, "s2s_cross")
    return checks


def markdown_table(report: dict) -> str:
    kinds = list(EVAL_KINDS)
    lines = ["| system | " + " | ".join(f"{k} EER % | {k} sim" for k in kinds) + " |",
             "|---|" + "---|---|" * len(kinds)]
    for key, label in ROWS:
        r = report["rows"][key]
        cells = " | ".join(f"{100 * r[k]['eer']:.2f} | {r[k]['mean_target']:.3f}" for k in kinds)
        lines.append(f"| {label} | {cells} |")
    gt = report["ground_truth"]
    lines.append("")
    lines.append(f"No conversion: speech-vs-speech EER {100 * gt['gt_speech']['eer']:.2f} %, "
                 f"speech-vs-whisper EER {100 * gt['gt_whisper']['eer']:.2f} %")
    return "\n".join(lines) + "\n"


def strip_wallclock(obj):
    if isinstance(obj, dict):
        return {k: strip_wallclock(v) for k, v in obj.items() if k != "wallclock"}
    if isinstance(obj, list):
        return [strip_wallclock(v) for v in obj]
    return obj


def package_digest() -> str:
    """sha256 over the library sources, so a stored report can be matched to the code that made it."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.stem in ENTRY_POINTS:
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_ablation(cfg: AblationConfig) -> dict:
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    for name in ("base", "ext"):
        if getattr(cfg, name) is None:
            raise ValueError(f"missing corpus size: {name}")
    base_v, base_w = filtered(*make_corpus(cfg.base, work / "base"), cfg.min_snr_db)
    ext_v, ext_w = filtered(*make_corpus(cfg.ext, work / "ext"), cfg.min_snr_db)
    eval_v, eval_w = make_corpus(cfg.eval, work / "eval")

    shared = train_shared(base_v, base_w, cfg)
    base_items = prepare_items(base_v, shared.projection, shared.spk_encoder, base_w, shared.codebook)
    ext_items = prepare_items(ext_v, shared.projection, shared.spk_encoder, ext_w, shared.codebook)

    protocols = {k: build_protocol(eval_v, k, cfg.seed, eval_w, n_targets=cfg.n_targets,
                                   n_nontarget=cfg.n_nontarget) for k in EVAL_KINDS}
    shared_hashes = {"speaker": state_hash(shared.spk_encoder), "adaptor": state_hash(shared.adaptor)}
    rows: dict[str, dict] = {}

    def run_row(key, model):
        system = VCSystem(shared.codebook, shared.projection, shared.spk_encoder, shared.adaptor, model)
        save_system(work / "ckpt" / key, system)
        rows[key] = evaluate(system, protocols, work / "converted" / key, cfg.gl_iterations)
        rows[key]["decoder_sha256"] = state_hash(model)
        logger.info("row %s: %s", key, {k: rows[key][k]["eer"] for k in EVAL_KINDS})

    fs = train_decoder("fastspeech", True, base_items, shared, cfg)
    run_row("fastspeech", fs)
    run_row("fastspeech_sl", continue_training(fs, base_items, shared, cfg, (3,)))
    run_row("fastspeech_sl_ext", train_decoder("fastspeech", True, ext_items, shared, cfg, (1, 2, 3)))
    run_row("speakervc", train_decoder("speakervc", False, base_items, shared, cfg))
    svc = train_decoder("speakervc", True, base_items, shared, cfg)
    run_row("speakervc_emb", svc)
    run_row("speakervc_emb_sl", continue_training(svc, base_items, shared, cfg, (3,)))
    run_row("speakervc_emb_sl_ext", train_decoder("speakervc", True, ext_items, shared, cfg, (1, 2, 3)))

    if {"speaker": state_hash(shared.spk_encoder), "adaptor": state_hash(shared.adaptor)} != shared_hashes:
        raise RuntimeError("shared components changed during the ablation")
    report = {
        "config": cfg.to_dict(),
        "package_sha256": package_digest(),
        "backend": backend_id(shared.spk_encoder),
        "protocols": {k: {"sha256": protocol_digest(p), **p.counts} for k, p in protocols.items()},
        "rows": rows,
        "ground_truth": ground_truth_rows(eval_v, eval_w, shared.spk_encoder, cfg.seed, cfg.n_nontarget),
    }
    report["checks"] = check_orderings(rows)
    (work / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (work / "ablation.md").write_text(markdown_table(report))
    return report
