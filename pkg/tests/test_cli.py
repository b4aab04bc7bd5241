import copy
import json

import pytest

from speakervc import checkpoint as ckpt
from speakervc.cli import run
from speakervc.evaluation import Protocol, Trial


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def ckpt_dir(tiny_system, tmp_path_factory):
    system, _ = tiny_system
    d = tmp_path_factory.mktemp("ckpt")
    for name, obj in [("codebook", system.codebook), ("projection", system.projection),
                      ("speaker", system.spk_encoder), ("adaptor", system.adaptor),
                      ("decoder:speakervc", system.decoder)]:
        ckpt.save_component(d, name, obj)
    return d


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_unknown_subcommand(workdir, capsys):
    assert run(["transmogrify"]) == 2
    assert _error(capsys)["exit"] == 2
    assert run(["train", "decoder"]) == 2


def test_bad_config(workdir, capsys):
    (workdir / "bad.cfg").write_text("units.k = lots\n")
    assert run(["--config", "bad.cfg", "eval", "eer", "--protocol", "p", "--scores", "s"]) == 3
    assert _error(capsys)["error"] == "ConfigError"
    assert run(["--set", "units.zz=1", "eval", "eer", "--protocol", "p", "--scores", "s"]) == 3
    assert run(["--set", "nonsense", "eval", "eer", "--protocol", "p", "--scores", "s"]) == 3


def test_missing_component(workdir, capsys):
    assert run(["convert", "--source", "a.wav", "--reference", "b.wav", "--out", "c.wav"]) == 4
    err = _error(capsys)
    assert err["error"] == "MissingComponentError" and "codebook" in err["message"]


def test_stage_order(workdir, ckpt_dir, small_corpus, capsys):
    d = workdir / "ck"
    assert run(["--set", f"paths.checkpoint={d}", "train", "decoder", "--stage", "3"]) == 4
    assert "stage order violation" in _error(capsys)["message"]
    dec = copy.deepcopy(ckpt.load_component(ckpt_dir, "decoder:speakervc"))
    dec.stages_done = [1]
    ckpt.save_component(d, "decoder:speakervc", dec)
    assert run(["--set", f"paths.checkpoint={d}", "train", "decoder", "--stage", "3"]) == 4
    assert "requires stage 2" in _error(capsys)["message"]


def test_eer_worked_example(workdir, capsys):
    labels = ["target"] * 3 + ["nontarget"] * 3
    Protocol("s2s_cross", [Trial(f"e{i}.wav", f"t{i}.wav", lab) for i, lab in enumerate(labels)]).write("p.txt")
    (workdir / "s.txt").write_text("\n".join(str(s) for s in [0.9, 0.8, 0.4, 0.7, 0.3, 0.2]) + "\n")
    assert run(["eval", "eer", "--protocol", "p.txt", "--scores", "s.txt", "--report", "r.json"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("eer=0.333333 threshold=")
    assert json.loads((workdir / "r.json").read_text())["eer"] == pytest.approx(1 / 3)
    stamps = list((workdir / "work/reports/stamps").glob("eval-eer-*.json"))
    assert len(stamps) == 1
    assert json.loads(stamps[0].read_text())["argv"][:2] == ["eval", "eer"]
    assert run(["eval", "eer", "--protocol", "p.txt", "--scores", "s.txt"]) == 0
    assert len(list((workdir / "work/reports/stamps").glob("eval-eer-*.json"))) == 2


def test_score_count_mismatch(workdir, capsys):
    Protocol("s2s_cross", [Trial("a.wav", "b.wav", "target"), Trial("a.wav", "c.wav", "nontarget")]).write("p.txt")
    (workdir / "s.txt").write_text("0.5\n")
    assert run(["eval", "eer", "--protocol", "p.txt", "--scores", "s.txt"]) == 1
    assert "2 trials" in _error(capsys)["message"]


def test_convert_and_stream(workdir, ckpt_dir, small_corpus, capsys):
    voiced, _ = small_corpus
    base = ["--set", f"paths.checkpoint={ckpt_dir}", "--set", "eval.gl_iterations=2"]
    assert run(base + ["convert", "--source", voiced[0].path, "--reference", voiced[5].path, "--out", "o.wav"]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["duration_s"] > 1.0
    assert run(base + ["stream-convert", "--source", voiced[0].path, "--reference", voiced[5].path,
                       "--out", "s.wav"]) == 0
    res = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert res["first_emission_at"] == 24000
    assert (workdir / "s.stream.jsonl").exists()
    assert run(base + ["eval", "sim", "--a", voiced[0].path, "--b", voiced[0].path]) == 0
    assert capsys.readouterr().out.startswith("sim=1.000000")
