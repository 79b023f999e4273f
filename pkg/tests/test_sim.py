import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sceend import sim
from sceend.sim import SimSpec


class TestOverlap:
    def test_hand_case(self):
        act = np.array([[1, 1, 0, 0], [0, 1, 1, 0]])
        assert sim.overlap_ratio(act) == pytest.approx(1 / 3)

    def test_silence(self):
        assert sim.overlap_ratio(np.zeros((2, 5))) == 0.0

    @given(st.integers(2, 6), st.floats(0.02, 0.9))
    @settings(max_examples=40, deadline=None)
    def test_expected_overlap_inverse(self, n, target):
        p = sim.activity_probability(target, n)
        assert sim.expected_overlap(p, n) == pytest.approx(target, abs=1e-6)

    def test_expected_overlap_monte_carlo(self):
        rng = np.random.default_rng(0)
        act = rng.random((3, 200000)) < 0.4
        assert sim.overlap_ratio(act) == pytest.approx(sim.expected_overlap(0.4, 3), abs=5e-3)


class TestSimulateMixture:
    def test_shapes_and_binary(self):
        spec = SimSpec(num_frames=120, feat_dim=6)
        feats, act = sim.simulate_mixture(spec, 3, seed=5)
        assert feats.frames.shape == (6, 120) and act.shape == (3, 120)
        assert set(np.unique(act)) <= {0.0, 1.0}
        assert act.any(axis=1).all()

    def test_single_speaker_has_no_overlap(self):
        _, act = sim.simulate_mixture(SimSpec(num_frames=200), 1, seed=3)
        assert sim.overlap_ratio(act) == 0.0

    def test_noise_free_composition(self):
        # a speaker that never leaves the on state: every frame = signature + background
        spec = SimSpec(min_speakers=1, max_speakers=1, num_frames=50, feat_dim=4,
                       noise_scale=0.0, mean_on=1e12, mean_off=1.0, calibrate=False)
        feats, act = sim.simulate_mixture(spec, 1, seed=0)
        assert act.all()
        cols = feats.frames
        np.testing.assert_allclose(cols, cols[:, :1].repeat(50, axis=1), atol=1e-12)
        assert np.linalg.norm(cols[:, 0]) <= spec.signature_scale + spec.background_scale + 1e-9

    def test_deterministic(self):
        spec = SimSpec(num_frames=80)
        a = sim.simulate_mixture(spec, 2, seed=9)
        b = sim.simulate_mixture(spec, 2, seed=9)
        np.testing.assert_array_equal(a[0].frames, b[0].frames)
        np.testing.assert_array_equal(a[1], b[1])

    def test_count_out_of_range(self):
        with pytest.raises(ValueError):
            sim.simulate_mixture(SimSpec(min_speakers=2, max_speakers=3), 4, seed=0)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SimSpec(min_speakers=3, max_speakers=2).validate()
        with pytest.raises(ValueError):
            SimSpec(overlap_target=1.0).validate()

    def test_unreachable_target_warns(self, caplog):
        spec = SimSpec(num_frames=300, overlap_target=0.9, mean_on=3.0, mean_off=200.0, calibrate=False)
        with caplog.at_level("WARNING", logger="sceend.sim"):
            _, act = sim.simulate_mixture(spec, 2, seed=1)
        assert act.any(axis=1).all()
        assert "not reached" in caplog.text


class TestCorpus:
    def test_empty(self, tmp_path):
        m = sim.build_corpus(SimSpec(num_frames=20), 0, seed=1, out_dir=tmp_path)
        assert m.entries == []
        assert sim.read_manifest(tmp_path / "manifest.tsv").entries == []

    def test_byte_identical(self, tmp_path):
        spec = SimSpec(num_frames=40, feat_dim=5)
        sim.build_corpus(spec, 4, seed=7, out_dir=tmp_path / "a")
        sim.build_corpus(spec, 4, seed=7, out_dir=tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_manifest_round_trip(self, tmp_path):
        spec = SimSpec(min_speakers=2, max_speakers=3, num_frames=30, overlap_target=0.25)
        m = sim.build_corpus(spec, 3, seed=11, out_dir=tmp_path)
        back = sim.read_manifest(tmp_path / "manifest.tsv")
        assert back.seed == 11 and back.spec == spec and back.entries == m.entries
        for e in back.entries:
            feats, labels = back.load(e)
            assert labels.shape == (e.num_speakers, e.num_frames)
            assert 2 <= e.num_speakers <= 3

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "manifest.tsv"
        p.write_text("#seed\t0\nr\ta\tb\t2\t10\nr\ta\tb\t2\t10\n")
        with pytest.raises(sim.fileio.FormatError):
            sim.read_manifest(p)

    def test_stats_recount(self, tmp_path):
        spec = SimSpec(num_frames=60, feat_dim=4)
        m = sim.build_corpus(spec, 6, seed=2, out_dir=tmp_path)
        stats = sim.corpus_stats(m)
        labels = [m.load(e)[1] for e in m.entries]
        counts = np.concatenate([l.sum(0) for l in labels])
        assert stats.overlap_ratio == pytest.approx((counts >= 2).sum() / (counts >= 1).sum())
        assert stats.num_recordings == 6
        assert sum(stats.recordings_per_count.values()) == 6
        assert stats.mean_duration == pytest.approx(6.0)
        assert "recordings\t6" in stats.render()

    def test_stats_all_silent(self):
        from sceend.model import FeatureSequence
        s = sim.corpus_stats([(FeatureSequence(np.zeros((2, 10))), np.zeros((2, 10)))])
        assert s.degenerate and s.overlap_ratio == 0.0
