import json
from dataclasses import replace

import numpy as np
import pytest

from speakervc.audio import voicing_score
from speakervc.data import (
    UtteranceRecord, SynthSpeakerSpec, derive_seed, filter_manifest, generate_toy_corpus, load_record,
    make_speakers, read_manifest, synthesize, text_plan, whisper_augment, write_manifest,
)


def _rec(uid, snr=None, dur=2.0, domain="voiced"):
    return UtteranceRecord(uid, uid.split("_")[0], f"/x/{uid}.wav", dur, domain, snr)


class TestCorpus:
    def test_counts(self, tmp_path):
        recs = generate_toy_corpus(5, 3, 7, tmp_path, noisy_fraction=0.0)
        assert len(recs) == 15
        assert len({r.speaker_id for r in recs}) == 5
        assert all(1.0 <= r.duration_s <= 6.0 for r in recs)
        assert (tmp_path / "speakers.json").exists()

    def test_deterministic_and_worker_independent(self, tmp_path):
        a = generate_toy_corpus(3, 2, 7, tmp_path / "a")
        b = generate_toy_corpus(3, 2, 7, tmp_path / "b", workers=3)
        for ra, rb in zip(a, b):
            assert open(ra.path, "rb").read() == open(rb.path, "rb").read()
        assert (tmp_path / "a/manifest.jsonl").read_text() == (tmp_path / "b/manifest.jsonl").read_text()

    def test_preconditions(self, tmp_path):
        with pytest.raises(ValueError):
            generate_toy_corpus(1, 3, 0, tmp_path)
        with pytest.raises(ValueError):
            generate_toy_corpus(3, 1, 0, tmp_path)
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="not writable"):
            generate_toy_corpus(2, 2, 0, blocker / "sub")

    def test_speakers_distinct_and_in_range(self):
        spks = make_speakers(20, 7)
        assert len({(s.f0_base, s.formant_shifts) for s in spks}) == 20
        assert all(85 <= s.f0_base <= 270 for s in spks)
        with pytest.raises(ValueError):
            SynthSpeakerSpec("x", (0, 0, 0, 0), 50.0, 5.0, -10.0, 0)

    def test_same_text_aligned_across_speakers(self):
        spk_a, spk_b = make_speakers(2, 3)
        segs, total = text_plan(3, "t0001")
        hop = 240

        def onsets(w):
            e = np.array([np.sum(w.samples[i:i + hop] ** 2) for i in range(0, len(w) - hop, hop)])
            active = e > e.max() * 1e-3
            return np.flatnonzero(np.diff(active.astype(int)) == 1)[0] + 1

        wa = synthesize(spk_a, segs, total, 1)
        wb = synthesize(spk_b, segs, total, 1)
        assert not np.allclose(wa.samples, wb.samples)
        assert len(wa) == len(wb)
        planned = segs[0].start_s * 24000 / hop
        assert abs(onsets(wa) - onsets(wb)) <= 1
        assert abs(onsets(wa) - planned) <= 2

    def test_text_plan_contract(self):
        for i in range(50):
            segs, total = text_plan(0, f"t{i:04d}")
            assert 1.0 <= total <= 6.0
            assert 5 <= len(segs) <= 12
            assert all(0.08 - 1e-9 <= s.dur_s <= 0.30 + 1e-9 for s in segs)
            assert segs[-1].end_s <= total
            assert all(a.end_s <= b.start_s + 1e-12 for a, b in zip(segs, segs[1:]))

    def test_derive_seed_stable(self):
        assert derive_seed(7, "utt", "spk0_000") == derive_seed(7, "utt", "spk0_000")
        assert derive_seed(7, "a") != derive_seed(7, "b")


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [_rec("s1_000", 12.0), _rec("s2_000")]
        write_manifest(recs, tmp_path / "m.jsonl")
        assert read_manifest(tmp_path / "m.jsonl") == recs
        keys = set(json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0]))
        assert keys == {"utt_id", "speaker_id", "path", "duration_s", "domain", "snr_db", "text_id"}

    def test_duplicate_ids_rejected(self, tmp_path):
        write_manifest([_rec("a_1"), _rec("a_1")], tmp_path / "m.jsonl")
        with pytest.raises(ValueError, match="duplicate"):
            read_manifest(tmp_path / "m.jsonl")

    def test_record_invariants(self):
        with pytest.raises(ValueError):
            _rec("a_1", dur=0.0)
        with pytest.raises(ValueError):
            _rec("a_1", domain="sung")


class TestFilter:
    def test_boundary_kept(self):
        out = filter_manifest([_rec("a_1", 9.9), _rec("a_2", 10.0)], 10.0)
        assert [r.utt_id for r in out] == ["a_2"]

    def test_duration(self):
        out = filter_manifest([_rec("a_1", 20, 0.99), _rec("a_2", 20, 1.0)], 10.0, 1.0)
        assert [r.utt_id for r in out] == ["a_2"]

    def test_identity_and_empty(self):
        recs = [_rec(f"a_{i}", 15.0 + i) for i in range(4)]
        assert filter_manifest(recs, 10.0) == recs
        assert filter_manifest([], 10.0) == []
        assert filter_manifest(recs, -np.inf, 0.0) == recs

    def test_idempotent(self):
        recs = [_rec(f"a_{i}", float(s)) for i, s in enumerate([3, 12, 10, 9.99, 40])]
        once = filter_manifest(recs, 10.0)
        assert filter_manifest(once, 10.0) == once

    def test_missing_snr_names_record(self):
        with pytest.raises(ValueError, match="a_7"):
            filter_manifest([_rec("a_7")], 10.0)


class TestWhisper:
    def test_pairs_and_voicing(self, small_corpus):
        voiced, whispered = small_corpus
        assert len(whispered) == len(voiced)
        by_id = {r.utt_id: r for r in voiced}
        for w in whispered:
            v = by_id[w.utt_id.removesuffix("_whisp")]
            assert w.domain == "whispered" and w.text_id == v.text_id
            assert abs(w.duration_s - v.duration_s) <= 1 / 24000
            assert voicing_score(load_record(w)) < 0.3

    def test_already_whispered_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="already whispered"):
            whisper_augment([_rec("a_1", domain="whispered")], tmp_path)

    def test_empty(self, tmp_path):
        assert whisper_augment([], tmp_path / "w") == []
        assert read_manifest(tmp_path / "w" / "manifest.jsonl") == []

    def test_manifest_paths_relative(self, small_corpus):
        _, whispered = small_corpus
        root = whispered[0].path.rsplit("/wavs/", 1)[0]
        line = json.loads(open(f"{root}/manifest.jsonl").readline())
        assert line["path"].startswith("wavs/")
        assert replace(whispered[0]).path.endswith(line["path"])
