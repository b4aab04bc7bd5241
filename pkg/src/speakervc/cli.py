"""``speakervc`` command line.

Exit status: 0 success, 1 runtime failure, 2 usage error or unknown
subcommand, 3 invalid configuration, 4 missing checkpoint component or stage
order violation. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, describe_keys

logger = logging.getLogger("speakervc")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# corpus helpers


def _corpus_manifest(corpus: Path) -> Path:
    filtered = corpus / "manifest.filtered.jsonl"
    return filtered if filtered.exists() else corpus / "manifest.jsonl"


def _whisper_dir(corpus: Path) -> Path:
    return corpus.with_name(corpus.name + "_whisper")


def _load_corpus(corpus: Path, need_whisper: bool = False) -> tuple[list, list]:
    from .data import read_manifest

    m = _corpus_manifest(corpus)
    if not m.exists():
        raise FileNotFoundError(f"no corpus manifest in {corpus}; run 'data synth' first")
    voiced = read_manifest(m)
    wm = _whisper_dir(corpus) / "manifest.jsonl"
    whispered = []
    if wm.exists():
        ids = {r.utt_id for r in voiced}
        whispered = [r for r in read_manifest(wm) if r.utt_id.removesuffix("_whisp") in ids]
    elif need_whisper:
        raise FileNotFoundError(f"no whispered corpus at {wm.parent}; run 'data whisper' first")
    return voiced, whispered


def _decoder_key(args) -> str:
    return ckpt.decoder_key(args.variant, not args.no_spk)


def _system(cfg: RunConfig, args):
    return ckpt.load_system(cfg.path("paths.checkpoint"), args.variant, not args.no_spk)


def _save(args, ckpt_dir, name: str, obj) -> None:
    """Save a component and remember its hash for this command's stamp."""
    args.written[name] = ckpt.save_component(ckpt_dir, name, obj)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data


def cmd_data_synth(cfg, args):
    from .data import generate_toy_corpus

    out = Path(args.out) if args.out else cfg.path("paths.corpus")
    n_spk = args.speakers or cfg["data.n_speakers"]
    n_utt = args.utts or cfg["data.utts_per_speaker"]
    seed = cfg["seeds.data"] if args.seed is None else args.seed
    noisy = cfg["data.noisy_fraction"] if args.noisy_fraction is None else args.noisy_fraction
    records = generate_toy_corpus(n_spk, n_utt, seed, out, noisy_fraction=noisy, workers=cfg["data.workers"],
                                  speaker_prefix=args.prefix)
    filtered = out / "manifest.filtered.jsonl"
    if filtered.exists():
        filtered.unlink()
    return {"corpus": str(out), "n_utterances": len(records)}


def cmd_data_filter(cfg, args):
    from .data import annotate_snr, filter_manifest, read_manifest, write_manifest

    corpus = Path(args.corpus) if args.corpus else cfg.path("paths.corpus")
    records = annotate_snr(read_manifest(corpus / "manifest.jsonl"))
    kept = filter_manifest(records, cfg["data.min_snr_db"], cfg["data.min_duration_s"])
    write_manifest([_relative(r, corpus) for r in kept], corpus / "manifest.filtered.jsonl")
    return {"kept": len(kept), "dropped": len(records) - len(kept)}


def _relative(r, root: Path):
    from dataclasses import replace

    p = Path(r.path)
    return replace(r, path=str(p.relative_to(root))) if p.is_relative_to(root) else r


def cmd_data_whisper(cfg, args):
    from .data import read_manifest, whisper_augment

    corpus = Path(args.corpus) if args.corpus else cfg.path("paths.corpus")
    records = read_manifest(corpus / "manifest.jsonl")
    out = whisper_augment(records, _whisper_dir(corpus), seed=cfg["seeds.data"], workers=cfg["data.workers"])
    return {"whispered": len(out), "dir": str(_whisper_dir(corpus))}


# ---------------------------------------------------------------------------
# training


def _frontend_features(cfg):
    from .data import load_record
    from .units import extract_frontend

    voiced, whispered = _load_corpus(cfg.path("paths.corpus"))
    return [extract_frontend(load_record(r)) for r in voiced + whispered]


def cmd_train_units(cfg, args):
    from .units import fit_kmeans

    cb = fit_kmeans(_frontend_features(cfg), cfg["units.k"], cfg["seeds.train"])
    _save(args, cfg.path("paths.checkpoint"), "codebook", cb)
    return {"k": cfg["units.k"], "inertia": cb.inertia_history[-1] if cb.inertia_history else None}


def cmd_train_projection(cfg, args):
    from .units import assign_units, train_unit_projection

    d = cfg.path("paths.checkpoint")
    cb = ckpt.load_component(d, "codebook")
    feats = _frontend_features(cfg)
    proj = train_unit_projection(feats, [assign_units(f, cb) for f in feats], cfg["units.projection_epochs"],
                                 cfg["seeds.train"], k=cb.k)
    _save(args, d, "projection", proj)
    return {"train_agreement": proj.accuracy_history[-1]}


def cmd_train_speaker(cfg, args):
    from .audio import MEL_CONFIGS
    from .speaker import train_speaker_encoder

    voiced, _ = _load_corpus(cfg.path("paths.corpus"))
    m = train_speaker_encoder(voiced, cfg["speaker.epochs"], cfg["seeds.train"], embed_dim=cfg["speaker.embed_dim"],
                              mel_config=MEL_CONFIGS[cfg["mel.speaker"]])
    _save(args, cfg.path("paths.checkpoint"), "speaker", m)
    return {"train_accuracy": m.accuracy_history[-1]}


def cmd_train_adaptor(cfg, args):
    from .adaptor import MelAdaptor, train_mel_adaptor
    from .audio import MEL_CONFIGS

    src, dst = MEL_CONFIGS[cfg["mel.decoder"]], MEL_CONFIGS[cfg["mel.speaker"]]
    if src == dst:
        a = MelAdaptor(src, dst)
    else:
        voiced, _ = _load_corpus(cfg.path("paths.corpus"))
        a = train_mel_adaptor(voiced, src, dst, epochs=cfg["adaptor.epochs"], seed=cfg["seeds.train"])
    _save(args, cfg.path("paths.checkpoint"), "adaptor", a)
    return {"bypass": a.bypass, "final_loss": a.loss_history[-1] if getattr(a, "loss_history", None) else None}


def cmd_train_decoder(cfg, args):
    from .decoders import DecoderModel, StageOrderError, TrainPlan, prepare_items, train_stage
    from .nn_utils import seeded

    d = cfg.path("paths.checkpoint")
    key = _decoder_key(args)
    if args.stage == 1 and not args.resume:
        with seeded(cfg["seeds.train"]):
            model = DecoderModel(args.variant, k=ckpt.load_component(d, "codebook").k,
                                 spk_dim=cfg["speaker.embed_dim"], use_spk=not args.no_spk,
                                 style_dim=cfg["decoder.style_dim"])
    elif ckpt.has_component(d, key):
        model = ckpt.load_component(d, key)
    else:
        raise StageOrderError(f"stage order violation: stage {args.stage} requires stage 1 of {key}")
    missing = [s for s in range(1, args.stage) if s not in model.stages_done]
    if missing:
        raise StageOrderError(f"stage order violation: stage {args.stage} requires stage {missing[0]} of {key}")
    codebook, projection = ckpt.load_component(d, "codebook"), ckpt.load_component(d, "projection")
    spk = ckpt.load_component(d, "speaker")
    adaptor = ckpt.load_component(d, "adaptor") if args.stage == 3 else None
    voiced, whispered = _load_corpus(cfg.path("paths.corpus"))
    items = prepare_items(voiced, projection, spk, whispered, codebook)
    epochs = args.epochs if args.epochs is not None else cfg[f"decoder.stage{args.stage}_epochs"]
    plan = TrainPlan(args.stage, epochs, cfg["seeds.train"], sl_weight=cfg["decoder.sl_weight"],
                     batch_size=cfg["decoder.batch_size"], lr=cfg["decoder.lr"],
                     whisper_prob=cfg["decoder.whisper_prob"])
    train_stage(model, plan, items, adaptor, spk)
    _save(args, d, key, model)
    return {"component": key, "stages_done": model.stages_done, "final": model.history[args.stage][-1]}


# ---------------------------------------------------------------------------
# conversion


def cmd_convert(cfg, args):
    from .audio import load_wav, save_wav
    from .decoders import convert

    system = _system(cfg, args)
    out = convert(load_wav(args.source), load_wav(args.reference), system, gl_iterations=cfg["eval.gl_iterations"])
    save_wav(args.out, out)
    return {"out": args.out, "duration_s": out.duration_s}


def cmd_stream_convert(cfg, args):
    from .audio import Waveform, load_wav, save_wav
    from .streaming import StreamConfig, StreamingConverter, measure_stream_rtf, split_chunks, stream_convert

    system = _system(cfg, args)
    chunk_s = args.chunk_s if args.chunk_s is not None else cfg["stream.chunk_s"]
    scfg = StreamConfig(chunk_s=chunk_s,
                        total_delay_s=args.delay_s if args.delay_s is not None else cfg["stream.delay_s"],
                        past_context_s=args.context_s if args.context_s is not None else cfg["stream.context_s"],
                        gl_iterations=cfg["eval.gl_iterations"], seed=cfg["seeds.train"])
    source, reference = load_wav(args.source), load_wav(args.reference)
    conv = StreamingConverter(system, reference, scfg)
    pieces = stream_convert(split_chunks(source, iter(lambda: scfg.samples(chunk_s), None)), reference, system,
                            scfg, converter=conv)
    out = Waveform(np.concatenate([p.samples for p in pieces]), conv.sr)
    save_wav(args.out, out)
    log = Path(args.log) if args.log else Path(args.out).with_suffix(".stream.jsonl")
    conv.write_log(log)
    return {"out": args.out, "log": str(log), "first_emission_at": conv.first_emission_at,
            "wallclock": {"rtf": measure_stream_rtf(conv)}}


# ---------------------------------------------------------------------------
# evaluation


def cmd_eval_build_protocol(cfg, args):
    from .evaluation import GT_KINDS, build_protocol, ground_truth_protocol

    corpus = Path(args.corpus) if args.corpus else cfg.path("paths.corpus")
    voiced, whispered = _load_corpus(corpus, need_whisper="w2s" in args.kind or args.kind == "gt_whisper")
    if args.kind in GT_KINDS:
        p = ground_truth_protocol(voiced, args.kind, cfg["seeds.eval"], whispered, n_nontarget=cfg["eval.n_nontarget"])
    else:
        p = build_protocol(voiced, args.kind, cfg["seeds.eval"], whispered, n_targets=cfg["eval.n_targets"],
                           n_nontarget=cfg["eval.n_nontarget"], max_sources=args.max_sources)
    out = Path(args.out) if args.out else cfg.path("paths.reports") / f"{args.kind}.protocol.txt"
    p.write(out)
    return {"protocol": str(out), "kind": p.kind, **p.counts}


def _converted_dir(cfg, args, protocol_path: Path) -> Path:
    if args.converted:
        return Path(args.converted)
    return cfg.path("paths.reports") / "converted" / f"{protocol_path.stem}-{_decoder_key(args).replace(':', '_')}"


def cmd_eval_score(cfg, args):
    from .audio import load_wav
    from .evaluation import backend_id, make_report, measure_rtf, read_protocol, run_conversions, score_trials, \
        write_scores

    ppath = Path(args.protocol)
    p = read_protocol(ppath)
    conv_dir = _converted_dir(cfg, args, ppath)
    extra = {"protocol": ppath.name, **p.counts}
    if p.jobs:
        system = _system(cfg, args)
        spk = system.spk_encoder
        t0 = time.perf_counter()
        run_conversions(p, system, conv_dir, cfg["eval.gl_iterations"])
        compute = time.perf_counter() - t0
        audio = sum(load_wav(conv_dir / j.output).duration_s for j in p.jobs)
        extra["decoder"] = _decoder_key(args)
        extra["wallclock"] = {"rtf": measure_rtf(audio, compute), "compute_s": compute}
    else:
        spk = ckpt.load_component(cfg.path("paths.checkpoint"), "speaker")
    scores = score_trials(p, conv_dir, spk)
    out = Path(args.out) if args.out else ppath.with_suffix(".scores.txt")
    write_scores(out, scores)
    report = make_report(p.kind, scores, [t.label for t in p.trials], backend_id(spk), extra)
    rpath = Path(args.report) if args.report else ppath.with_suffix(".report.json")
    _write_json(rpath, report)
    return {"scores": str(out), "report": str(rpath), **{k: report[k] for k in ("eer", "mean_similarity")
                                                          if k in report}}


def _scored(args):
    from .evaluation import read_protocol, read_scores

    p = read_protocol(args.protocol)
    s = read_scores(args.scores)
    if len(s) != len(p.trials):
        raise ValueError(f"{len(s)} scores for {len(p.trials)} trials")
    return p, s, [t.label for t in p.trials]


def cmd_eval_eer(cfg, args):
    from .evaluation import compute_eer, make_report

    p, s, labels = _scored(args)
    eer, thr = compute_eer(s, labels)
    print(f"eer={eer:.6f} threshold={thr:.6f}")
    if args.report:
        _write_json(Path(args.report), make_report(p.kind, s, labels, args.backend))
    return {"eer": eer, "threshold": thr}


def cmd_eval_sim(cfg, args):
    from .audio import load_wav
    from .evaluation import speaker_similarity

    if args.a and args.b:
        spk = ckpt.load_component(cfg.path("paths.checkpoint"), "speaker")
        sim = speaker_similarity(load_wav(args.a), load_wav(args.b), spk)
        print(f"sim={sim:.6f}")
        return {"sim": sim}
    if not (args.protocol and args.scores):
        raise UsageError("eval sim needs either --a/--b or --protocol/--scores")
    p, s, labels = _scored(args)
    y = np.array([lab == "target" for lab in labels])
    sim = float(s[y].mean())
    print(f"mean_sim={sim:.6f} n={int(y.sum())}")
    return {"mean_sim": sim}


# ---------------------------------------------------------------------------
# plots


def cmd_plot_det(cfg, args):
    from .plots import plot_det

    p, s, labels = _scored(args)
    out = Path(args.out) if args.out else Path(args.scores).with_suffix(".det.svg")
    eer = plot_det(s, labels, out, title=f"DET {p.kind}")
    return {"svg": str(out), "eer": eer}


def cmd_plot_loss(cfg, args):
    from .plots import plot_losses

    comp = ckpt.load_component(cfg.path("paths.checkpoint"), args.component)
    if args.component.startswith("decoder"):
        curves = {f"stage {s}": [row["loss"] for row in rows] for s, rows in sorted(comp.history.items())}
    else:
        curves = {args.component: list(comp.loss_history)}
    out = Path(args.out) if args.out else cfg.path("paths.reports") / f"loss-{args.component.replace(':', '_')}.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_losses(curves, out, title=f"{args.component} loss")
    return {"svg": str(out)}


# ---------------------------------------------------------------------------
# quickstart


def cmd_quickstart(cfg, args):
    """Synthesize, train every component and stage, convert, evaluate on held-out speakers."""
    base = ["--config", args.config] if args.config else []
    for kv in args.set or []:
        base += ["--set", kv]
    corpus = cfg.path("paths.corpus")
    held_out = corpus.with_name(corpus.name + "_eval")
    reports = cfg.path("paths.reports")
    steps = [
        ["data", "synth"], ["data", "filter"], ["data", "whisper"],
        ["train", "units"], ["train", "projection"], ["train", "speaker"], ["train", "adaptor"],
        *[["train", "decoder", "--variant", args.variant, "--stage", str(s)] for s in (1, 2, 3)],
        ["data", "synth", "--out", str(held_out), "--speakers", str(args.eval_speakers), "--utts",
         str(args.eval_utts), "--seed", str(cfg["seeds.data"] + 1000), "--prefix", "evs", "--noisy-fraction", "0"],
        ["data", "whisper", "--corpus", str(held_out)],
    ]
    for argv in steps:
        if run(base + argv) != 0:
            raise RuntimeError(f"quickstart step failed: {' '.join(argv)}")
    from .data import read_manifest

    evs = read_manifest(held_out / "manifest.jsonl")
    src = evs[0]
    ref = next(r for r in evs if r.speaker_id != src.speaker_id)
    if run(base + ["convert", "--variant", args.variant, "--source", src.path, "--reference", ref.path,
                   "--out", str(reports / "quickstart_convert.wav")]) != 0:
        raise RuntimeError("quickstart conversion failed")
    summary = {}
    for kind in args.kinds:
        proto = reports / f"quickstart_{kind}.protocol.txt"
        for argv in (["eval", "build-protocol", "--kind", kind, "--corpus", str(held_out), "--out", str(proto),
                      "--max-sources", str(args.max_sources)],
                     ["eval", "score", "--variant", args.variant, "--protocol", str(proto)],
                     ["plot", "det", "--protocol", str(proto), "--scores", str(proto.with_suffix(".scores.txt"))]):
            if run(base + argv) != 0:
                raise RuntimeError(f"quickstart step failed: {' '.join(argv)}")
        summary[kind] = json.loads(proto.with_suffix(".report.json").read_text())
    run(base + ["plot", "loss", "--component", ckpt.decoder_key(args.variant)])
    _write_json(reports / "quickstart.json", summary)
    return {"report": str(reports / "quickstart.json"),
            **{f"eer[{k}]": v.get("eer") for k, v in summary.items()}}


# ---------------------------------------------------------------------------
# parser


def _decoder_args(p, stage: bool = False):
    p.add_argument("--variant", choices=("fastspeech", "speakervc"), default="speakervc")
    p.add_argument("--no-spk", action="store_true", help="speakervc without the speaker embedding")
    if stage:
        p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
        p.add_argument("--epochs", type=int, help="override the configured epoch count")
        p.add_argument("--resume", action="store_true", help="stage 1 continues the stored decoder")


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import GT_KINDS, KINDS

    parser = _Parser(prog="speakervc", description="Zero-shot voice conversion toolkit on synthetic speech.",
                     epilog="config keys (file format 'section.key = value'; SPEAKERVC_SEED overrides seeds.*):\n"
                            + describe_keys(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    data = sub.add_parser("data").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = data.add_parser("synth")
    p.add_argument("--out")
    p.add_argument("--speakers", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix", default="spk")
    p.add_argument("--noisy-fraction", type=float)
    p.set_defaults(func=cmd_data_synth)
    for name, fn in (("filter", cmd_data_filter), ("whisper", cmd_data_whisper)):
        p = data.add_parser(name)
        p.add_argument("--corpus")
        p.set_defaults(func=fn)

    train = sub.add_parser("train").add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name, fn in (("units", cmd_train_units), ("projection", cmd_train_projection),
                     ("speaker", cmd_train_speaker), ("adaptor", cmd_train_adaptor)):
        train.add_parser(name).set_defaults(func=fn)
    p = train.add_parser("decoder")
    _decoder_args(p, stage=True)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("convert")
    _decoder_args(p)
    for a in ("--source", "--reference", "--out"):
        p.add_argument(a, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("stream-convert")
    _decoder_args(p)
    for a in ("--source", "--reference", "--out"):
        p.add_argument(a, required=True)
    p.add_argument("--chunk-s", type=float)
    p.add_argument("--delay-s", type=float)
    p.add_argument("--context-s", type=float)
    p.add_argument("--log", help="accounting log (JSON lines); defaults next to --out")
    p.set_defaults(func=cmd_stream_convert)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = ev.add_parser("build-protocol")
    p.add_argument("--kind", choices=KINDS + GT_KINDS, required=True)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--max-sources", type=int)
    p.set_defaults(func=cmd_eval_build_protocol)
    p = ev.add_parser("score")
    _decoder_args(p)
    p.add_argument("--protocol", required=True)
    p.add_argument("--converted", help="directory of converted audio")
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_score)
    p = ev.add_parser("eer")
    p.add_argument("--protocol", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--report")
    p.add_argument("--backend", default="unspecified")
    p.set_defaults(func=cmd_eval_eer)
    p = ev.add_parser("sim")
    for a in ("--a", "--b", "--protocol", "--scores"):
        p.add_argument(a)
    p.set_defaults(func=cmd_eval_sim)

    pl = sub.add_parser("plot").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = pl.add_parser("det")
    p.add_argument("--protocol", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_det)
    p = pl.add_parser("loss")
    p.add_argument("--component", default="decoder:speakervc")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_loss)

    p = sub.add_parser("quickstart")
    p.add_argument("--variant", choices=("fastspeech", "speakervc"), default="speakervc")
    p.add_argument("--eval-speakers", type=int, default=6)
    p.add_argument("--eval-utts", type=int, default=4)
    p.add_argument("--max-sources", type=int, default=12)
    p.add_argument("--kinds", nargs="+", default=["s2s_cross", "w2s_same"])
    p.set_defaults(func=cmd_quickstart)
    return parser


def _stamp_name(args, argv: list[str]) -> str:
    parts = [args.command] + ([args.action] if getattr(args, "action", None) else [])
    if args.command == "train" and args.action == "decoder":
        parts += [_decoder_key(args).replace(":", "_"), f"stage{args.stage}"]
    parts.append(hashlib.sha256(json.dumps(argv).encode()).hexdigest()[:8])
    return "-".join(parts)


def _write_stamp(cfg: RunConfig, args, argv: list[str], result: dict) -> None:
    stamp = {
        "argv": argv,
        "config_sha256": cfg.digest(),
        "seeds": cfg.seeds,
        "components_written": dict(sorted(args.written.items())),
        "result": _strip_wallclock(result),
    }
    _write_json(cfg.path("paths.reports") / "stamps" / f"{_stamp_name(args, argv)}.json", stamp)


def _strip_wallclock(obj):
    if isinstance(obj, dict):
        return {k: _strip_wallclock(v) for k, v in obj.items() if k != "wallclock"}
    return obj


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    from .decoders import StageOrderError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s %(message)s")
    try:
        overrides = {}
        for kv in args.set or []:
            if "=" not in kv:
                raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
            k, v = kv.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = RunConfig.load(args.config, overrides)
        args.written = {}
        result = args.func(cfg, args) or {}
        _write_stamp(cfg, args, argv, result)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (ckpt.MissingComponentError, StageOrderError) as exc:
        return _fail(EXIT_MISSING, exc)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
