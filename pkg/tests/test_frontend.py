import numpy as np
import pytest

from casr import frontend as fe


def make_spec(**kw):
    base = dict(vocab_size=5, feature_dim=3, frames_per_token=3,
                duration_jitter=0, noise_sigma=0.0, seed=7)
    base.update(kw)
    return fe.SynthTaskSpec(**base)


class TestSynthUtterance:
    def test_empty_gives_one_silence_frame(self):
        feats, toks, ends = fe.synth_utterance(
            make_spec(), 0, np.random.default_rng(0))
        assert toks == [] and ends == []
        assert feats.num_frames == 1
        np.testing.assert_array_equal(feats.frames, 0.0)

    def test_noiseless_rendering_is_exact_tiling(self):
        spec = make_spec()
        feats, toks, ends = fe.synth_utterance(spec, 2,
                                               np.random.default_rng(1))
        assert len(toks) == 2
        assert ends == [2, 5]
        mu_a, mu_b = spec.token_mean(toks[0]), spec.token_mean(toks[1])
        np.testing.assert_array_equal(
            feats.frames, np.concatenate([np.tile(mu_a, (3, 1)),
                                          np.tile(mu_b, (3, 1))]))

    def test_determinism(self):
        spec = make_spec(noise_sigma=0.4, duration_jitter=1)
        a = fe.synth_utterance(spec, 5, np.random.default_rng(3))
        b = fe.synth_utterance(spec, 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0].frames, b[0].frames)
        assert a[1] == b[1] and a[2] == b[2]

    def test_token_means_depend_on_seed(self):
        assert not np.array_equal(make_spec(seed=1).token_mean(2),
                                  make_spec(seed=2).token_mean(2))

    def test_negative_length_rejected(self):
        with pytest.raises(ValueError):
            fe.synth_utterance(make_spec(), -1, np.random.default_rng(0))


class TestSynthLongform:
    def test_single_segment_equals_utterance(self):
        spec = make_spec(noise_sigma=0.2)
        a = fe.synth_utterance(spec, 4, np.random.default_rng(5))
        b = fe.synth_longform(spec, 1, 4, 3, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0].frames, b[0].frames)
        assert a[1] == b[1] and a[2] == b[2]

    def test_frame_count_arithmetic(self):
        spec = make_spec(frames_per_token=2)
        feats, toks, ends = fe.synth_longform(spec, 2, 1, 3,
                                              np.random.default_rng(6))
        assert feats.num_frames == 2 + 3 + 2
        assert ends == [1, 6]

    def test_label_concatenation_length(self):
        spec = make_spec()
        _, toks, ends = fe.synth_longform(spec, 3, 4, 2,
                                          np.random.default_rng(7))
        assert len(toks) == 12
        assert len(ends) == 12
        assert ends == sorted(ends)


class TestStackAndSubsample:
    def test_identity(self):
        rng = np.random.default_rng(8)
        x = fe.FeatureSequence(rng.standard_normal((7, 2)), 10.0)
        y = fe.stack_and_subsample(x, 1, 1)
        np.testing.assert_array_equal(y.frames, x.frames)
        assert y.frame_period_ms == 10.0

    def test_index_arithmetic(self):
        x = fe.FeatureSequence(np.arange(24, dtype=float).reshape(12, 2), 10.0)
        y = fe.stack_and_subsample(x, 4, 3)
        assert y.frames.shape == (4, 8)
        # output frame t' holds input frames [3t', 3t'+3]
        np.testing.assert_array_equal(y.frames[0], x.frames[0:4].reshape(-1))
        # last frame stacks inputs 9,10,11 and one zero pad
        expect = np.concatenate([x.frames[9:12].reshape(-1), np.zeros(2)])
        np.testing.assert_array_equal(y.frames[3], expect)
        assert y.frame_period_ms == 30.0

    def test_single_frame_all_padding_tail(self):
        x = fe.FeatureSequence(np.array([[1.0, 2.0]]), 10.0)
        y = fe.stack_and_subsample(x, 4, 3)
        np.testing.assert_array_equal(
            y.frames, [[1.0, 2.0, 0, 0, 0, 0, 0, 0]])

    def test_every_input_frame_covered_when_stride_1(self):
        rng = np.random.default_rng(9)
        x = fe.FeatureSequence(rng.standard_normal((9, 1)), 10.0)
        y = fe.stack_and_subsample(x, 3, 1)
        assert y.frames.shape == (9, 3)
        np.testing.assert_array_equal(y.frames[:, 0], x.frames[:, 0])


class TestDiskFormat:
    def test_feature_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        x = fe.FeatureSequence(
            rng.standard_normal((6, 3)).astype(np.float32).astype(np.float64),
            30.0)
        p = tmp_path / "u.feat"
        fe.write_feature_file(p, x)
        y = fe.read_feature_file(p)
        np.testing.assert_array_equal(y.frames, x.frames)
        assert y.frame_period_ms == 30.0

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.feat"
        p.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            fe.read_feature_file(p)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(11)
        x = fe.FeatureSequence(rng.standard_normal((6, 3)), 10.0)
        p = tmp_path / "u.feat"
        fe.write_feature_file(p, x)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ValueError, match="truncated"):
            fe.read_feature_file(p)

    def test_manifest_roundtrip(self, tmp_path):
        recs = [fe.ManifestRecord("u0", "feats/u0.feat", [1, 2, 3], [2, 5, 9]),
                fe.ManifestRecord("u1", "feats/u1.feat", [], [])]
        p = tmp_path / "manifest.jsonl"
        fe.write_manifest(p, recs)
        back = fe.read_manifest(p)
        assert [r.__dict__ for r in back] == [r.__dict__ for r in recs]
