import numpy as np
import pytest

from oracles import brute_force_assign
from speakervc.data import load_record, make_speakers, synthesize, text_plan
from speakervc.units import (
    FRONTEND, FrontendFeatures, UnitCodebook, assign_units, deltas, extract_frontend, extract_soft_units,
    fit_kmeans, inertia, train_unit_projection,
)
from speakervc.audio import Waveform


def _active_cosine(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    both = (na > 1e-6) & (nb > 1e-6)
    return float(np.mean(np.sum(a[both] * b[both], 1) / (na[both] * nb[both])))


@pytest.fixture(scope="module")
def unit_setup(small_corpus):
    voiced, whispered = small_corpus
    fv = [extract_frontend(load_record(r)) for r in voiced]
    fw = [extract_frontend(load_record(r)) for r in whispered]
    cb = fit_kmeans(fv + fw, 16, 0)
    train = fv[:12] + fw[:12]
    held = fv[12:] + fw[12:]
    proj = train_unit_projection(train, [assign_units(f, cb) for f in train], 20, 0, k=16)
    return cb, proj, fv, fw, train, held


class TestFrontend:
    def test_shape_one_second(self):
        x = np.random.default_rng(0).standard_normal(24000) * 0.1
        f = extract_frontend(Waveform(x, 24000))
        assert f.values.shape == (100, 26)
        assert f.frame_rate_hz == pytest.approx(100.0)

    def test_silence_is_constant(self):
        f = extract_frontend(Waveform(np.zeros(12000), 24000))
        assert np.all(f.values == f.values[0])

    def test_too_short(self):
        with pytest.raises(ValueError, match="two hops"):
            extract_frontend(Waveform(np.zeros(300), 24000))

    def test_level_invariant(self):
        x = np.random.default_rng(1).standard_normal(24000) * 0.1
        a = extract_frontend(Waveform(x, 24000)).values
        b = extract_frontend(Waveform(4 * x, 24000)).values
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_content_dominates_speaker(self):
        spk = make_speakers(4, 3)
        same, diff = [], []
        for i in range(3):
            segs, tot = text_plan(3, f"t{i:04d}")
            other, otot = text_plan(3, f"t{i + 10:04d}")
            a = extract_frontend(synthesize(spk[0], segs, tot, 1)).values
            b = extract_frontend(synthesize(spk[1 + i], segs, tot, 1)).values
            c = extract_frontend(synthesize(spk[0], other, otot, 1)).values
            same.append(_active_cosine(a, b))
            diff.append(_active_cosine(a, c))
        assert np.mean(same) >= np.mean(diff)

    def test_deltas_of_ramp(self):
        x = np.arange(20, dtype=float)[:, None] * 3.0
        d = deltas(x, 2)
        np.testing.assert_allclose(d[2:-2], 3.0)


class TestKMeans:
    def test_repeated_points_are_fixed_point(self):
        pts = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]])
        x = np.repeat(pts, 10, axis=0)
        cb = fit_kmeans([x], 3, 0)
        assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, pts))
        assert inertia([x], cb) == 0.0

    def test_two_blobs(self, rng):
        a = rng.normal([0.0, 0.0], 0.3, (200, 2))
        b = rng.normal([6.0, 6.0], 0.3, (200, 2))
        cb = fit_kmeans([np.vstack([a, b])], 2, 3)
        got = sorted(map(tuple, cb.centroids))
        want = sorted([tuple(a.mean(0)), tuple(b.mean(0))])
        np.testing.assert_allclose(got, want, atol=0.1)

    def test_beats_random_centroids(self, unit_setup):
        cb, _, fv, fw, _, _ = unit_setup
        x = np.unique(np.concatenate([f.values for f in fv + fw]), axis=0)
        pick = np.random.default_rng(0).choice(len(x), cb.k, replace=False)
        baseline = UnitCodebook(x[pick])
        assert inertia(fv + fw, cb) < inertia(fv + fw, baseline)

    def test_inertia_non_increasing(self, unit_setup):
        h = np.array(unit_setup[0].inertia_history)
        assert len(h) >= 2
        assert np.all(np.diff(h) <= 1e-9 * h[0])

    def test_deterministic(self, rng):
        x = rng.standard_normal((300, 4))
        a, b = fit_kmeans([x], 5, 9), fit_kmeans([x], 5, 9)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_errors(self, rng):
        x = rng.standard_normal((50, 3))
        with pytest.raises(ValueError, match="insufficient"):
            fit_kmeans([x], 6, 0)
        with pytest.raises(ValueError):
            fit_kmeans([x], 1, 0)

    def test_codebook_invariants(self):
        with pytest.raises(ValueError, match="identical"):
            UnitCodebook(np.array([[1.0, 2.0], [1.0, 2.0]]))
        with pytest.raises(ValueError):
            UnitCodebook(np.array([[1.0, np.inf], [0.0, 0.0]]))


class TestAssign:
    def test_exact_centroid(self, rng):
        c = rng.standard_normal((32, 26))
        assert assign_units(c[17:18], UnitCodebook(c))[0] == 17

    def test_tie_goes_to_lowest_index(self):
        c = np.zeros((12, 2))
        c[:, 0] = np.arange(12) + 10.0
        c[3] = [1.0, 0.0]
        c[9] = [-1.0, 0.0]
        assert assign_units(np.zeros((1, 2)), UnitCodebook(c))[0] == 3

    def test_matchesbrute_force_assign(self, unit_setup):
        cb, _, fv, _, _, _ = unit_setup
        f = fv[0]
        np.testing.assert_array_equal(assign_units(f, cb), brute_force_assign(f.values, cb.centroids))

    def test_dimension_mismatch(self, unit_setup):
        with pytest.raises(ValueError, match="dimension"):
            assign_units(np.zeros((3, 5)), unit_setup[0])


class TestProjection:
    def test_train_accuracy(self, unit_setup):
        _, proj, _, _, _, _ = unit_setup
        assert proj.accuracy_history[-1] >= 0.9

    def test_loss_decreases(self, unit_setup):
        losses = np.array(unit_setup[1].loss_history)
        assert losses[-5:].mean() < losses[:5].mean()

    def test_held_out_agreement(self, unit_setup):
        cb, proj, _, _, _, held = unit_setup
        hits = np.concatenate([np.argmax(proj(f.values), 1) == assign_units(f, cb) for f in held])
        assert hits.mean() >= 0.8

    def test_whisper_robust(self, unit_setup):
        # pilot on this fixture: 0.90
        _, proj, fv, fw, _, _ = unit_setup
        agree = np.concatenate([np.argmax(proj(a.values), 1) == np.argmax(proj(b.values), 1)
                                for a, b in zip(fv, fw)])
        assert agree.mean() >= 0.6

    def test_zero_epochs_is_init(self, rng):
        x = rng.standard_normal((100, 4))
        y = rng.integers(0, 3, 100)
        a = train_unit_projection([x], y, 0, 5, k=3)
        b = train_unit_projection([x], y, 0, 5, k=3)
        c = train_unit_projection([x], y, 2, 5, k=3)
        np.testing.assert_array_equal(a.weight, b.weight)
        assert not np.array_equal(a.weight, c.weight)

    def test_deterministic(self, rng):
        x = rng.standard_normal((200, 4))
        y = (x[:, 0] > 0).astype(int)
        a = train_unit_projection([x], y, 3, 1, k=2)
        b = train_unit_projection([x], y, 3, 1, k=2)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_frontend_untouched(self, unit_setup):
        before = FRONTEND.digest()
        cb, _, fv, _, _, _ = unit_setup
        proj = train_unit_projection(fv[:2], [assign_units(f, cb) for f in fv[:2]], 1, 0, k=cb.k)
        assert FRONTEND.digest() == before == proj.frontend_digest

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            train_unit_projection([], np.zeros(0, dtype=int), 1, 0, k=2)


class TestSoftUnits:
    def test_shape_and_discrete(self, unit_setup):
        cb, proj, fv, _, _, _ = unit_setup
        f = FrontendFeatures(fv[0].values[:100], 100.0)
        su = extract_soft_units(f, proj, cb)
        assert su.logits.shape == (100, cb.k)
        np.testing.assert_array_equal(su.discrete, assign_units(f, cb))

    def test_dimension_mismatch(self, unit_setup):
        with pytest.raises(ValueError, match="dimension"):
            extract_soft_units(FrontendFeatures(np.zeros((4, 7)), 100.0), unit_setup[1])
