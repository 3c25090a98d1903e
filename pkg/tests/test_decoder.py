"""Decoder tests: greedy hand traces, beam search against exhaustive
likelihood oracles, and streaming versus offline equivalence."""

import collections

import numpy as np
import pytest

from casr import tensor as T
from casr.decoder import (DecodeResult, StreamingSession, beam_decode,
                          decode_dual, greedy_decode)
from casr.encoders import EncoderOutput
from casr.frontend import FeatureSequence
from casr.model import Model, ModelConfig
from casr.transducer import rnnt_loss


def identity_joint_model():
    """Model whose joint logits are tanh(e_row), independent of the label
    history: vocab 2, raw 3-dim features pass straight through both
    encoders, We and Wout are identity, Wp is zero."""
    config = ModelConfig(
        vocab_size=2, feature_dim=3, stack=1, stride=1, joint_units=3,
        embed_units=4, pred_hidden=4, pred_proj=4,
        encoder=dict(causal_layers=0, noncausal_kind="identity",
                     noncausal_layers=0))
    model = Model(config, seed=0)
    model.params["joint/We"].data = np.eye(3)
    model.params["joint/Wp"].data = np.zeros((4, 3))
    model.params["joint/b"].data = np.zeros(3)
    model.params["joint/Wout"].data = np.eye(3)
    model.params["joint/bout"].data = np.zeros(3)
    return model


def small_model(seed, **enc):
    enc_cfg = dict(causal_layers=1, hidden_units=8, proj_units=8,
                   noncausal_kind="identity", noncausal_layers=0)
    enc_cfg.update(enc)
    config = ModelConfig(vocab_size=3, feature_dim=4, embed_units=4,
                         pred_hidden=8, pred_proj=8, joint_units=8,
                         encoder=enc_cfg)
    return Model(config, seed=seed)


def logp_rows(rows):
    z = np.tanh(np.asarray(rows, dtype=float))
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class TestGreedy:
    def test_hand_trace(self):
        model = identity_joint_model()
        rows = [[0.0, 5.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 5.0]]
        feats = FeatureSequence(np.asarray(rows), frame_period_ms=10.0)
        res = decode_dual(feats, model, "causal", max_symbols_per_frame=1)
        assert res.tokens == [1, 2]
        assert res.emit_frames == [0, 2]
        lp = logp_rows(rows)
        expected = lp[0, 1] + lp[1, 0] + lp[2, 2]
        assert abs(res.score - expected) < 1e-12

    def test_symbol_cap_forces_advance(self):
        model = identity_joint_model()
        feats = FeatureSequence(np.asarray([[0.0, 5.0, 0.0]]),
                                frame_period_ms=10.0)
        res = decode_dual(feats, model, "causal", max_symbols_per_frame=4)
        assert res.tokens == [1, 1, 1, 1]
        assert res.emit_frames == [0, 0, 0, 0]
        lp = logp_rows([[0.0, 5.0, 0.0]])
        assert abs(res.score - 4 * lp[0, 1]) < 1e-12

    def test_tie_prefers_blank(self):
        model = identity_joint_model()
        feats = FeatureSequence(np.zeros((3, 3)), frame_period_ms=10.0)
        res = decode_dual(feats, model, "causal")
        assert res.tokens == []
        lp = logp_rows(np.zeros((3, 3)))
        assert abs(res.score - 3 * lp[0, 0]) < 1e-12

    def test_empty_encoder_output(self):
        model = small_model(1)
        e = EncoderOutput(T.Tensor(np.zeros((0, 8))), 40.0, "causal")
        res = greedy_decode(e, model)
        assert res.tokens == [] and res.emit_frames == []
        assert res.score == 0.0

    def test_emit_frames_non_decreasing(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            model = small_model(seed)
            feats = FeatureSequence(rng.normal(size=(12, 4)),
                                    frame_period_ms=10.0)
            res = decode_dual(feats, model, "causal")
            assert res.emit_frames == sorted(res.emit_frames)
            assert np.isfinite(res.score)

    def test_identity_cascade_modes_agree(self):
        rng = np.random.default_rng(3)
        model = small_model(4)
        feats = FeatureSequence(rng.normal(size=(10, 4)),
                                frame_period_ms=10.0)
        a = decode_dual(feats, model, "causal")
        b = decode_dual(feats, model, "noncausal")
        assert a.tokens == b.tokens and a.score == b.score

    def test_max_symbols_validation(self):
        model = small_model(1)
        e = EncoderOutput(T.Tensor(np.zeros((2, 8))), 40.0, "causal")
        with pytest.raises(ValueError):
            greedy_decode(e, model, max_symbols_per_frame=0)


class TestBeam:
    def test_beam_one_matches_greedy(self):
        rng = np.random.default_rng(11)
        for seed in range(50):
            model = small_model(seed)
            feats = FeatureSequence(rng.normal(size=(8, 4)),
                                    frame_period_ms=10.0)
            with T.no_grad():
                e = model.encode(feats, "causal")
            g = greedy_decode(e, model)
            b = beam_decode(e, model, beam=1)
            assert b.tokens == g.tokens
            assert b.emit_frames == g.emit_frames
            per_frame = collections.Counter(g.emit_frames)
            if all(c < 4 for c in per_frame.values()):
                assert abs(b.score - g.score) < 1e-12

    def test_exhaustive_likelihood_oracle(self):
        # T = 2 encoder frames, vocab 2, cap 2: a beam of 1024 never prunes
        # (at most 31 label prefixes x 2 frames x 3 cap states), so every
        # candidate with |y| <= 2 sits in the finished pool with its full
        # alignment mass, which rnnt_loss computes independently.
        config = ModelConfig(
            vocab_size=2, feature_dim=4, stack=1, stride=1, joint_units=6,
            embed_units=4, pred_hidden=4, pred_proj=4,
            encoder=dict(causal_layers=0, noncausal_kind="identity",
                         noncausal_layers=0))
        cands = [[], [1], [2], [1, 1], [1, 2], [2, 1], [2, 2]]
        rng = np.random.default_rng(23)
        for seed in range(10):
            model = Model(config, seed=seed)
            e = EncoderOutput(T.Tensor(rng.normal(size=(2, 4))), 10.0,
                              "causal")
            res = beam_decode(e, model, beam=1024, max_symbols_per_frame=2)

            def exact_ll(y):
                with T.no_grad():
                    logits = model.joint(e.features, model.pred_forward(y))
                loss, _ = rnnt_loss(logits, y)
                return -float(loss.data)

            best_cand = max(exact_ll(y) for y in cands)
            assert res.score >= best_cand - 1e-9
            if len(res.tokens) <= 2:
                assert abs(res.score - exact_ll(res.tokens)) < 1e-9
            else:
                assert res.score <= exact_ll(res.tokens) + 1e-9

    def test_score_non_decreasing_in_beam(self):
        rng = np.random.default_rng(31)
        for seed in range(4):
            model = small_model(seed + 100)
            feats = FeatureSequence(rng.normal(size=(6, 4)),
                                    frame_period_ms=10.0)
            with T.no_grad():
                e = model.encode(feats, "causal")
            scores = [beam_decode(e, model, beam=b).score
                      for b in (1, 2, 4, 8)]
            for lo, hi in zip(scores, scores[1:]):
                assert hi >= lo - 1e-12

    def test_empty_frames(self):
        model = small_model(1)
        e = EncoderOutput(T.Tensor(np.zeros((0, 8))), 40.0, "causal")
        res = beam_decode(e, model, beam=4)
        assert res.tokens == [] and res.score == 0.0

    def test_beam_validation(self):
        model = small_model(1)
        e = EncoderOutput(T.Tensor(np.zeros((2, 8))), 40.0, "causal")
        with pytest.raises(ValueError):
            beam_decode(e, model, beam=0)


class TestStreaming:
    def offline(self, model, frames):
        feats = FeatureSequence(frames, frame_period_ms=10.0)
        with T.no_grad():
            return greedy_decode(model.encode_causal(feats), model)

    def run_session(self, model, frames):
        session = StreamingSession(model)
        emitted = []
        for row in frames:
            emitted.extend(session.push(row))
        return session, session.finalize(), emitted

    def test_lstm_with_time_reduction_matches_offline(self):
        rng = np.random.default_rng(5)
        model = small_model(
            9, causal_layers=2, time_reduction_after_layer=1)
        frames = rng.normal(size=(23, 4))
        off = self.offline(model, frames)
        session, res, emitted = self.run_session(model, frames)
        assert res.tokens == off.tokens
        assert res.emit_frames == off.emit_frames
        assert res.score == off.score
        assert off.tokens[:len(emitted)] == emitted

    def test_conformer_causal_matches_offline(self):
        rng = np.random.default_rng(6)
        model = small_model(12, causal_kind="conformer", causal_layers=1,
                            attn_heads=2, conv_kernel=3)
        frames = rng.normal(size=(17, 4))
        off = self.offline(model, frames)
        _, res, _ = self.run_session(model, frames)
        assert res.tokens == off.tokens and res.score == off.score

    def test_varied_lengths(self):
        rng = np.random.default_rng(8)
        model = small_model(2)
        for n in (1, 2, 3, 5, 10):
            frames = rng.normal(size=(n, 4))
            off = self.offline(model, frames)
            _, res, _ = self.run_session(model, frames)
            assert res.tokens == off.tokens and res.score == off.score

    def test_midstream_prefix_equals_offline_prefix(self):
        rng = np.random.default_rng(9)
        model = small_model(9, causal_layers=2, time_reduction_after_layer=1)
        frames = rng.normal(size=(23, 4))
        session = StreamingSession(model)
        for row in frames[:15]:
            session.push(row)
        feats = FeatureSequence(frames, frame_period_ms=10.0)
        with T.no_grad():
            enc = model.encode_causal(feats)
        # 15 input frames, stack 2 / stride 2, then halved: 3 frames ready
        assert session.consumed == 3
        prefix = EncoderOutput(T.Tensor(enc.features.data[:3]),
                               enc.frame_period_ms, "causal")
        off = greedy_decode(prefix, model)
        assert list(session.state.tokens) == off.tokens

    def test_partial_hypotheses_are_prefixes(self):
        rng = np.random.default_rng(10)
        model = small_model(3)
        session = StreamingSession(model)
        for row in rng.normal(size=(20, 4)):
            session.push(row)
        session.finalize()
        snaps = [h for _, h in session.partial_log]
        for a, b in zip(snaps, snaps[1:]):
            assert b[:len(a)] == a

    def test_hypothesis_change_log(self):
        model = identity_joint_model()
        session = StreamingSession(model, max_symbols_per_frame=1)
        session.push([0.0, 5.0, 0.0])
        session.push([5.0, 0.0, 0.0])
        session.push([0.0, 0.0, 5.0])
        res = session.finalize()
        assert res.tokens == [1, 2]
        assert session.hypothesis_change_log() == 2

    def test_push_validation(self):
        model = small_model(1)
        session = StreamingSession(model)
        with pytest.raises(T.DimensionError):
            session.push(np.zeros(3))
        session.push(np.zeros(4))
        session.finalize()
        with pytest.raises(RuntimeError):
            session.push(np.zeros(4))

    def test_finalize_without_frames(self):
        res = StreamingSession(small_model(1)).finalize()
        assert res.tokens == [] and res.score == 0.0


class TestDecodeResult:
    def test_alignment_validation(self):
        with pytest.raises(ValueError):
            DecodeResult([1, 2], [0], 0.0)
        with pytest.raises(ValueError):
            DecodeResult([1, 2], [3, 1], 0.0)

    def test_beam_path_through_decode_dual(self):
        rng = np.random.default_rng(13)
        model = small_model(5)
        feats = FeatureSequence(rng.normal(size=(6, 4)),
                                frame_period_ms=10.0)
        res = decode_dual(feats, model, "causal", beam=2)
        assert isinstance(res, DecodeResult)
