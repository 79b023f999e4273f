import numpy as np
import pytest

from sceend import cli, decode, fileio, metrics, sim
from sceend import model as M
from sceend.metrics import Segment, SegmentList

SAMPLE = "SPEAKER rec01 1 0.000 1.500 <NA> <NA> spk0 <NA> <NA>\n"

TINY = ("hidden_dim\t8\nnum_heads\t2\nffn_dim\t12\nnum_blocks\t1\nmax_speakers\t3\n"
        "eend_speakers\t3\ndropout\t0.0\n")


class TestRttm:
    def test_parse_sample(self):
        got = fileio.parse_rttm(SAMPLE)
        assert got["rec01"].entries == [Segment("spk0", 0.0, 1.5)]

    def test_round_trip(self, tmp_path):
        sl = SegmentList("r", [Segment("b", 1.25, 0.5), Segment("a", 0.0, 2.0)])
        fileio.write_rttm(tmp_path / "r.rttm", sl)
        back = fileio.read_rttm(tmp_path / "r.rttm")["r"]
        assert sorted(back.entries, key=lambda s: s.start) == sorted(sl.entries, key=lambda s: s.start)
        assert fileio.format_rttm(back) == fileio.format_rttm(sl)

    @pytest.mark.parametrize("line", [
        "SPEAKER rec 1 abc 1.0 <NA> <NA> s <NA> <NA>",
        "SPEAKER rec 1 0.0 0.0 <NA> <NA> s <NA> <NA>",
        "LEXEME rec 1 0.0 1.0 <NA> <NA> s <NA> <NA>",
        "SPEAKER rec 1 0.0",
    ])
    def test_malformed_line_reports_number(self, line):
        with pytest.raises(fileio.FormatError, match=":2:"):
            fileio.parse_rttm(SAMPLE + line + "\n")

    def test_directory_registers_empty_files(self, tmp_path):
        (tmp_path / "quiet.rttm").write_text("")
        (tmp_path / "rec01.rttm").write_text(SAMPLE)
        got = fileio.read_rttm(tmp_path)
        assert set(got) == {"quiet", "rec01"} and got["quiet"].entries == []


class TestBinaryFormats:
    def test_features_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(5, 17)).astype(np.float32).astype(np.float64)
        fileio.write_features(tmp_path / "a.scef", x)
        np.testing.assert_array_equal(fileio.read_features(tmp_path / "a.scef"), x)

    def test_features_layout_is_frame_major(self, tmp_path):
        x = np.arange(6, dtype=float).reshape(2, 3)
        fileio.write_features(tmp_path / "a.scef", x)
        body = np.frombuffer((tmp_path / "a.scef").read_bytes()[16:], dtype="<f4")
        np.testing.assert_array_equal(body, [0, 3, 1, 4, 2, 5])

    def test_labels_round_trip(self, tmp_path, rng):
        y = (rng.random((3, 11)) > 0.5).astype(float)
        fileio.write_labels(tmp_path / "a.scel", y)
        np.testing.assert_array_equal(fileio.read_labels(tmp_path / "a.scel"), y)

    def test_bad_magic_and_truncation(self, tmp_path):
        fileio.write_features(tmp_path / "a.scef", np.zeros((2, 3)))
        with pytest.raises(fileio.FormatError, match="magic"):
            fileio.read_labels(tmp_path / "a.scef")
        raw = (tmp_path / "a.scef").read_bytes()
        (tmp_path / "b.scef").write_bytes(raw[:-1])
        with pytest.raises(fileio.FormatError):
            fileio.read_features(tmp_path / "b.scef")

    def test_non_binary_labels(self, tmp_path):
        with pytest.raises(fileio.FormatError):
            fileio.write_labels(tmp_path / "a.scel", np.full((1, 2), 0.5))


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path, tiny_config):
        params = M.init_model(tiny_config, seed=3)
        cli.checkpoint_save(tmp_path / "a.ckpt", params, meta={"epoch": 2})
        ck = cli.checkpoint_load(tmp_path / "a.ckpt")
        cli.checkpoint_save(tmp_path / "b.ckpt", ck.params, meta=ck.meta)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert ck.config == tiny_config

    def test_optimizer_state_round_trip(self, tmp_path, tiny_config):
        from sceend import numcore as nc
        params = M.init_model(tiny_config, seed=3)
        st = nc.adam_init(params.arrays, warmup_steps=5)
        grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
        new, st = nc.adam_step(params.arrays, grads, st)
        cli.checkpoint_save(tmp_path / "a.ckpt", M.ModelParams(tiny_config, new), st)
        ck = cli.checkpoint_load(tmp_path / "a.ckpt")
        assert ck.optim.step == 1 and ck.optim.warmup_steps == 5
        for k in new:
            np.testing.assert_array_equal(ck.optim.m[k], st.m[k])
            np.testing.assert_array_equal(ck.optim.v[k], st.v[k])

    def test_inference_replay(self, tmp_path, tiny_config, rng):
        params = M.init_model(tiny_config, seed=4)
        x = M.FeatureSequence(rng.normal(size=(tiny_config.feat_dim, 30)))
        cli.checkpoint_save(tmp_path / "a.ckpt", params)
        again = cli.checkpoint_load(tmp_path / "a.ckpt").params
        a, b = decode.infer(params, x), decode.infer(again, x)
        np.testing.assert_array_equal(a.posteriors, b.posteriors)

    def test_truncated(self, tmp_path, tiny_config):
        cli.checkpoint_save(tmp_path / "a.ckpt", M.init_model(tiny_config, seed=0))
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(raw[:-8])
        with pytest.raises(fileio.FormatError, match="data bytes"):
            cli.checkpoint_load(tmp_path / "b.ckpt")

    def test_version_and_magic(self, tmp_path):
        (tmp_path / "a.ckpt").write_bytes(b"SCEEND-CHECKPOINT\t9\nend\t0\n")
        with pytest.raises(fileio.FormatError, match="version"):
            fileio.load_checkpoint(tmp_path / "a.ckpt")
        (tmp_path / "b.ckpt").write_bytes(b"hello\nend\t0\n")
        with pytest.raises(fileio.FormatError):
            fileio.load_checkpoint(tmp_path / "b.ckpt")


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def corpus(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--out", tmp_path / "data", "--n", 3, "--speakers", "1-2",
                     "--seed", 5, "--frames", 24, "--feat-dim", 4)
    assert code == 0
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


class TestCli:
    def test_usage_errors(self, capsys, tmp_path):
        assert run(capsys, "simulate", "--n", 1, "--seed", 0)[0] == 2
        assert run(capsys, "bogus")[0] == 2
        code, _, err = run(capsys, "train", "--manifest", "m", "--out", tmp_path)
        assert code == 2 and "--seed" in err

    def test_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--manifest", tmp_path / "nope.tsv", "--out", tmp_path,
                           "--seed", 0)
        assert code == 1 and "error" in err

    def test_simulate_prints_stats(self, capsys, tmp_path):
        code, out, _ = run(capsys, "simulate", "--out", tmp_path, "--n", 2, "--seed", 1,
                           "--frames", 10, "--feat-dim", 3)
        assert code == 0 and out.startswith("recordings\t2\n")

    def test_train_resume_is_reproducible(self, capsys, corpus):
        common = ["--manifest", corpus / "data" / "manifest.tsv", "--config", corpus / "tiny.cfg",
                  "--seed", 3, "--loss", "two-stage-pit"]
        assert run(capsys, "train", "--out", corpus / "full", "--epochs", 2, *common)[0] == 0
        assert run(capsys, "train", "--out", corpus / "half", "--epochs", 1, *common)[0] == 0
        code, out, _ = run(capsys, "train", "--manifest", corpus / "data" / "manifest.tsv",
                           "--out", corpus / "half", "--resume", corpus / "half" / "last.ckpt",
                           "--epochs", 2)
        assert code == 0 and out.startswith("2\t")
        assert (corpus / "full" / "last.ckpt").read_bytes() == (corpus / "half" / "last.ckpt").read_bytes()
        ck = cli.checkpoint_load(corpus / "full" / "last.ckpt")
        assert ck.config.hidden_dim == 8 and ck.meta["run.loss"] == "sc-two-stage-pit"

    def test_config_rejects_unknown_key(self, capsys, corpus):
        (corpus / "bad.cfg").write_text("colour\tblue\n")
        code, _, err = run(capsys, "train", "--manifest", corpus / "data" / "manifest.tsv",
                           "--out", corpus / "o", "--seed", 0, "--config", corpus / "bad.cfg")
        assert code == 2 and "colour" in err

    def test_infer_then_score_and_count(self, capsys, corpus):
        run(capsys, "train", "--manifest", corpus / "data" / "manifest.tsv", "--out", corpus / "m",
            "--config", corpus / "tiny.cfg", "--seed", 0, "--epochs", 1)
        code, out, _ = run(capsys, "infer", "--checkpoint", corpus / "m" / "last.ckpt",
                           "--manifest", corpus / "data" / "manifest.tsv", "--out", corpus / "hyp")
        assert code == 0 and len(out.splitlines()) == 3
        assert sorted(p.name for p in (corpus / "hyp").iterdir()) == [
            "rec0000.rttm", "rec0001.rttm", "rec0002.rttm"]
        code, out, _ = run(capsys, "score", "--ref", corpus / "hyp", "--hyp", corpus / "hyp")
        assert code == 0 and out.splitlines()[-1].startswith("ALL")
        code, out, _ = run(capsys, "count", "--ref", corpus / "hyp", "--hyp", corpus / "hyp")
        assert code == 0 and "Acc: 100.0%" in out

    def test_silence_gives_empty_rttm(self, capsys, tmp_path, tiny_config):
        params = M.init_model(tiny_config, seed=0)
        arrays = dict(params.arrays, **{"out.w": np.zeros_like(params.arrays["out.w"]),
                                        "out.b": np.full_like(params.arrays["out.b"], -30.0)})
        cli.checkpoint_save(tmp_path / "a.ckpt", M.ModelParams(tiny_config, arrays))
        fileio.write_features(tmp_path / "quiet.scef", np.zeros((tiny_config.feat_dim, 20)))
        code, out, _ = run(capsys, "infer", "--checkpoint", tmp_path / "a.ckpt",
                           "--features", tmp_path / "quiet.scef", "--out", tmp_path / "hyp")
        assert code == 0 and out == "quiet\t0\n"
        assert (tmp_path / "hyp" / "quiet.rttm").read_text() == ""

    def test_feature_dim_mismatch(self, capsys, tmp_path, tiny_config):
        cli.checkpoint_save(tmp_path / "a.ckpt", M.init_model(tiny_config, seed=0))
        fileio.write_features(tmp_path / "x.scef", np.zeros((tiny_config.feat_dim + 1, 5)))
        code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "a.ckpt",
                           "--features", tmp_path / "x.scef", "--out", tmp_path / "hyp")
        assert code == 1 and "expects" in err

    def _score(self, capsys, tmp_path, ref, hyp, *extra):
        (tmp_path / "ref.rttm").write_text(ref)
        (tmp_path / "hyp.rttm").write_text(hyp)
        return run(capsys, "score", "--ref", tmp_path / "ref.rttm", "--hyp", tmp_path / "hyp.rttm",
                   *extra)

    def test_score_identical(self, capsys, tmp_path):
        code, out, _ = self._score(capsys, tmp_path, SAMPLE, SAMPLE)
        assert code == 0 and out.splitlines()[-1].endswith("\t0.00")

    def test_score_default_collar(self, capsys, tmp_path):
        ref = "SPEAKER r 1 0.000 10.000 <NA> <NA> a <NA> <NA>\n"
        hyp = "SPEAKER r 1 0.000 5.000 <NA> <NA> a <NA> <NA>\n"
        code, out, _ = self._score(capsys, tmp_path, ref, hyp)
        assert out.splitlines()[-1] == "ALL\t4.750\t0.000\t0.000\t9.500\t50.00"
        code, out, _ = self._score(capsys, tmp_path, ref, hyp, "--collar", 0)
        assert out.splitlines()[-1] == "ALL\t5.000\t0.000\t0.000\t10.000\t50.00"

    def test_score_unmatched_ids(self, capsys, tmp_path):
        other = SAMPLE.replace("rec01", "rec02")
        code, _, err = self._score(capsys, tmp_path, SAMPLE, other)
        assert code == 1 and "rec01 has no hypothesis" in err
        code, out, _ = self._score(capsys, tmp_path, SAMPLE, other, "--allow-partial")
        assert code == 0 and out.startswith("ALL")

    def test_malformed_rttm_exit(self, capsys, tmp_path):
        code, _, err = self._score(capsys, tmp_path, SAMPLE, "garbage line\n")
        assert code == 1 and ":1:" in err

    def test_simulate_writes_reference_rttm(self, capsys, tmp_path):
        code, _, _ = run(capsys, "simulate", "--out", tmp_path / "d", "--n", 2, "--seed", 4,
                         "--frames", 30, "--feat-dim", 3, "--rttm", tmp_path / "ref")
        assert code == 0
        m = sim.read_manifest(tmp_path / "d" / "manifest.tsv")
        ref = fileio.read_rttm(tmp_path / "ref")
        for e in m.entries:
            _, labels = m.load(e)
            act, _ = decode.segments_to_activity(ref[e.recording_id], 0.1, 30)
            got = metrics.frame_der(labels, act, 0.1)
            assert got.der == 0.0 and len(ref[e.recording_id].speakers()) == e.num_speakers
