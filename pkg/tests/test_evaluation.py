import shutil

import numpy as np
import pytest

from oracles import random_eer_instance as _random_instance, sweep_eer
from speakervc.data import UtteranceRecord, load_record
from speakervc.evaluation import (
    Trial, build_protocol, compute_eer, det_points, ground_truth_protocol, in_sim_range, make_report,
    measure_rtf, read_protocol, read_scores, score_trials, speaker_similarity, write_scores,
)


def _rec(uid, spk, dur, domain="voiced"):
    return UtteranceRecord(uid, spk, f"/x/{uid}.wav", dur, domain, None)


class TestEER:
    def test_worked_example(self):
        scores = [0.9, 0.8, 0.4, 0.7, 0.3, 0.2]
        labels = ["target"] * 3 + ["nontarget"] * 3
        eer, thr = compute_eer(scores, labels)
        assert eer == pytest.approx(1 / 3, abs=1e-12)
        assert 0.4 < thr <= 0.7

    def test_extremes(self):
        assert compute_eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0
        assert compute_eer([0.5] * 6, [1, 0] * 3)[0] == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError, match="target and one nontarget"):
            compute_eer([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            det_points([0.1], [0])

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(0)
        sizes = np.unique(np.r_[np.round(np.exp(rng.uniform(np.log(2), np.log(10_000), 97))).astype(int),
                                [2, 3, 10_000]])
        while len(sizes) < 100:
            sizes = np.unique(np.r_[sizes, rng.integers(2, 10_000, 100 - len(sizes))])
        for n in sizes[:100]:
            s, y = _random_instance(rng, int(n))
            assert abs(compute_eer(s, y)[0] - sweep_eer(s, y)) <= 1e-9, n

    def test_monotone_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s, y = _random_instance(rng, int(rng.integers(2, 400)))
            base = compute_eer(s, y)[0]
            assert abs(compute_eer(3.0 * s - 7.0, y)[0] - base) <= 1e-9
            assert abs(compute_eer(s ** 3 + s, y)[0] - base) <= 1e-9

    def test_det_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            s, y = _random_instance(rng, int(rng.integers(2, 60)))
            pts = det_points(s, y)
            far = [p[1] for p in pts]
            frr = [p[2] for p in pts]
            assert all(a >= b for a, b in zip(far, far[1:]))
            assert all(a <= b for a, b in zip(frr, frr[1:]))
            assert len(pts) == len(np.unique(s)) + 1

    def test_eer_on_curve(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s, y = _random_instance(rng, int(rng.integers(2, 200)))
            eer, _ = compute_eer(s, y)
            pts = det_points(s, y)
            on = False
            for (_, a0, r0), (_, a1, r1) in zip(pts, pts[1:]):
                if (a0 - r0) * (a1 - r1) <= 0:
                    d0, d1 = a0 - r0, a1 - r1
                    w = 0.0 if d0 == d1 else d0 / (d0 - d1)
                    x, z = a0 + w * (a1 - a0), r0 + w * (r1 - r0)
                    on = abs(x - eer) <= 1e-9 and abs(z - eer) <= 1e-9
                    break
            assert on or any(abs(a - eer) <= 1e-9 and abs(r - eer) <= 1e-9 for _, a, r in pts)

    def test_separated_pair(self):
        pts = det_points([0.9, 0.1], [1, 0])
        assert (0.0, 0.0) in [(p[1], p[2]) for p in pts]


class TestProtocols:
    def test_s2s_cross_contract(self, small_corpus):
        voiced, _ = small_corpus
        p = build_protocol(voiced, "s2s_cross", 0)
        speakers = {r.speaker_id for r in voiced}
        assert {j.target_speaker for j in p.jobs} == speakers
        enroll_paths = {t.enroll for t in p.trials}
        assert len(enroll_paths) == len(speakers)
        assert all(t.enroll != t.test for t in p.trials)
        assert all(j.target_speaker != j.source_speaker for j in p.jobs)
        assert not enroll_paths & ({j.source for j in p.jobs} | {j.reference for j in p.jobs})
        assert p.counts["n_target"] == len(p.jobs)

    def test_w2s_same(self, small_corpus):
        voiced, whispered = small_corpus
        p = build_protocol(voiced, "w2s_same", 0, whispered)
        by_path = {r.path: r for r in whispered}
        assert p.jobs
        for j in p.jobs:
            assert by_path[j.source].domain == "whispered"
            assert j.target_speaker == j.source_speaker
            assert j.reference != j.source.replace("_whisp", "")

    def test_deterministic(self, small_corpus):
        voiced, whispered = small_corpus
        a = build_protocol(voiced, "w2s_cross", 4, whispered)
        b = build_protocol(voiced, "w2s_cross", 4, whispered)
        assert a.trials == b.trials and a.jobs == b.jobs

    def test_errors(self, small_corpus):
        voiced, _ = small_corpus
        with pytest.raises(ValueError, match="whispered"):
            build_protocol(voiced, "w2s_same", 0)
        one = [r for r in voiced if r.speaker_id == voiced[0].speaker_id]
        with pytest.raises(ValueError, match="2 speakers"):
            build_protocol(one, "s2s_cross", 0)
        with pytest.raises(ValueError, match="unknown"):
            build_protocol(voiced, "t2s", 0)

    def test_sim_length_filter(self):
        recs = [_rec(f"a_{i}", "a", d) for i, d in enumerate([3.9, 4.0, 10.0, 10.1])]
        recs += [_rec(f"b_{i}", "b", 5.0) for i in range(2)]
        p = build_protocol(recs, "sim_cross_sentence", 0)
        sources = {j.source for j in p.jobs}
        assert "/x/a_1.wav" in sources and "/x/a_2.wav" in sources
        assert "/x/a_0.wav" not in sources and "/x/a_3.wav" not in sources
        assert in_sim_range(4.0) and in_sim_range(10.0) and not in_sim_range(10.0001)

    def test_sim_cross_speaker_compares_with_reference_utterance(self):
        recs = [_rec(f"{s}_{i}", s, 5.0) for s in "abc" for i in range(2)]
        p = build_protocol(recs, "sim_cross_speaker", 0)
        for j, t in zip(p.jobs, p.trials):
            assert j.target_speaker != j.source_speaker
            assert t.enroll == j.reference

    def test_round_trip(self, small_corpus, tmp_path):
        voiced, whispered = small_corpus
        p = build_protocol(voiced, "w2s_cross", 1, whispered)
        p.write(tmp_path / "p.txt")
        q = read_protocol(tmp_path / "p.txt")
        assert (q.kind, q.seed, q.trials, q.jobs) == (p.kind, p.seed, p.trials, p.jobs)

    def test_ground_truth(self, small_corpus):
        voiced, whispered = small_corpus
        g = ground_truth_protocol(voiced, "gt_whisper", 0, whispered)
        assert all(t.test.endswith("_whisp.wav") for t in g.trials)
        with pytest.raises(ValueError):
            Trial("a.wav", "a.wav", "target")


class TestScoring:
    def test_identical_copy_scores_one(self, tiny_system, small_corpus, tmp_path):
        system, _ = tiny_system
        src = small_corpus[0][0].path
        shutil.copy(src, tmp_path / "copy.wav")
        s = score_trials([Trial(src, "copy.wav", "target")], tmp_path, system.spk_encoder)
        assert s[0] == pytest.approx(1.0, abs=1e-6)
        w = load_record(small_corpus[0][0])
        assert speaker_similarity(w, w, system.spk_encoder) == pytest.approx(1.0, abs=1e-6)

    def test_missing_audio(self, tiny_system, tmp_path):
        with pytest.raises(FileNotFoundError):
            score_trials([Trial("/nope/a.wav", "b.wav", "target")], tmp_path, tiny_system[0].spk_encoder)

    def test_scores_file_round_trip(self, tmp_path):
        write_scores(tmp_path / "s.txt", [0.25, -0.5])
        np.testing.assert_array_equal(read_scores(tmp_path / "s.txt"), [0.25, -0.5])

    def test_report_names_backend(self):
        r = make_report("s2s_cross", [0.9, 0.1], ["target", "nontarget"], "tdnn-x")
        assert r["backend"] == "tdnn-x" and r["eer"] == 0.0


class TestRTF:
    def test_definition(self):
        assert measure_rtf(10.0, 0.5) == 0.05
        assert measure_rtf(10.0, 10.0) == 1.0
        with pytest.raises(ValueError):
            measure_rtf(0.0, 1.0)
