import json
import os
import re
from pathlib import Path

import numpy as np
import pytest

from speakervc.data import generate_toy_corpus, whisper_augment

_criteria: dict[str, bool] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    name = mark.args[0]
    _criteria[name] = _criteria.get(name, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(re.sub(r"\D", "", n))):
        terminalreporter.write_line(f"{name} {'PASS' if _criteria[name] else 'FAIL'}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 speakers x 4 utterances, noise-free, with whispered twins."""
    root = tmp_path_factory.mktemp("corpus")
    voiced = generate_toy_corpus(4, 4, 11, root / "c", noisy_fraction=0.0)
    whispered = whisper_augment(voiced, root / "c_whisper", seed=11)
    return voiced, whispered


@pytest.fixture(scope="session")
def tiny_system(small_corpus):
    """Every component trained for a handful of steps: enough for contracts, not for quality."""
    from speakervc.adaptor import train_mel_adaptor
    from speakervc.data import load_record
    from speakervc.decoders import DecoderModel, TrainPlan, VCSystem, prepare_items, train_stage
    from speakervc.nn_utils import seeded
    from speakervc.speaker import train_speaker_encoder
    from speakervc.units import assign_units, extract_frontend, fit_kmeans, train_unit_projection

    voiced, whispered = small_corpus
    feats = [extract_frontend(load_record(r)) for r in voiced + whispered]
    cb = fit_kmeans(feats, 16, 0)
    proj = train_unit_projection(feats, [assign_units(f, cb) for f in feats], 3, 0, k=16)
    spk = train_speaker_encoder(voiced, 2, 0)
    adaptor = train_mel_adaptor(voiced, epochs=1, seed=0)
    items = prepare_items(voiced, proj, spk, whispered, cb)
    with seeded(0):
        dec = DecoderModel("speakervc", k=16)
    for stage in (1, 2, 3):
        train_stage(dec, TrainPlan(stage, 1, 0), items, adaptor, spk)
    return VCSystem(cb, proj, spk, adaptor, dec), items


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    """The full desk-scale ablation; ``SPEAKERVC_ABLATION_DIR`` reuses a finished run of the same code."""
    from speakervc.experiments import AblationConfig, package_digest, run_ablation

    work = os.environ.get("SPEAKERVC_ABLATION_DIR")
    work = Path(work) if work else tmp_path_factory.mktemp("ablation")
    cfg = AblationConfig(str(work))
    report_path = work / "ablation.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        if report.get("package_sha256") == package_digest() and report.get("config") == json.loads(
                json.dumps(cfg.to_dict())):
            return report, work
    return run_ablation(cfg), work
