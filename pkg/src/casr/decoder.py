"""Greedy and beam transducer decoding, plus an incremental streaming session.

All decoding runs under no_grad on numpy buffers. The greedy rule: at each
encoder frame repeatedly take the argmax joint symbol; blank advances time,
a label extends the hypothesis (at most `max_symbols_per_frame` labels per
frame, then a forced advance). Ties break toward the lowest symbol id, with
blank lowest of all.
"""

from dataclasses import dataclass

import numpy as np

from casr import tensor as T
from casr.frontend import FeatureSequence


@dataclass
class DecodeResult:
    tokens: list
    emit_frames: list          # encoder-frame index per emitted token
    score: float

    def __post_init__(self):
        if len(self.tokens) != len(self.emit_frames):
            raise ValueError("tokens and emit_frames must align")
        if any(b < a for a, b in zip(self.emit_frames, self.emit_frames[1:])):
            raise ValueError("emit_frames must be non-decreasing")


def _log_softmax_vec(v):
    m = v.max()
    z = v - m
    return z - np.log(np.exp(z).sum())


class _PredState:
    """Incremental prediction-network state (one projected LSTM layer)."""

    __slots__ = ("h", "c", "out")

    def __init__(self, h, c, out):
        self.h = h
        self.c = c
        self.out = out


def _pred_step(model, state, token_id):
    p = model.params
    Wx = p["pred/lstm/Wx"].data
    Wh = p["pred/lstm/Wh"].data
    b = p["pred/lstm/b"].data
    Wp = p["pred/lstm/Wp"].data
    hidden = Wp.shape[0]
    x = p["pred/embed"].data[token_id]
    h_prev = np.zeros(Wp.shape[1]) if state is None else state.h
    c_prev = np.zeros(hidden) if state is None else state.c
    gates = x @ Wx + h_prev @ Wh + b
    i = _sigmoid(gates[:hidden])
    f = _sigmoid(gates[hidden:2 * hidden])
    g = np.tanh(gates[2 * hidden:3 * hidden])
    o = _sigmoid(gates[3 * hidden:])
    c = f * c_prev + i * g
    h = (o * np.tanh(c)) @ Wp
    return _PredState(h, c, h)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _pred_start(model):
    return _pred_step(model, None, 0)


def _joint_vec(model, e_row, pred_row):
    p = model.params
    h = np.tanh(e_row @ p["joint/We"].data + pred_row @ p["joint/Wp"].data
                + p["joint/b"].data)
    return h @ p["joint/Wout"].data + p["joint/bout"].data


class _GreedyState:
    """Carries the greedy decoder across encoder frames (streaming reuse)."""

    def __init__(self, model, max_symbols_per_frame):
        if max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")
        self.model = model
        self.max_symbols = max_symbols_per_frame
        self.pred = _pred_start(model)
        self.tokens = []
        self.emit_frames = []
        self.score = 0.0

    def consume_frame(self, e_row, frame_index):
        emitted = []
        for _ in range(self.max_symbols):
            logp = _log_softmax_vec(_joint_vec(self.model, e_row,
                                               self.pred.out))
            k = int(np.argmax(logp))   # first max: lowest id, blank first
            if k == 0:
                self.score += logp[0]
                break
            self.score += logp[k]
            self.tokens.append(k)
            self.emit_frames.append(frame_index)
            emitted.append(k)
            self.pred = _pred_step(self.model, self.pred, k)
        return emitted

    def result(self):
        return DecodeResult(list(self.tokens), list(self.emit_frames),
                            self.score)


def greedy_decode(e, model, max_symbols_per_frame=4):
    """Greedy decode of an EncoderOutput (either mode)."""
    with T.no_grad():
        frames = e.features.data
        state = _GreedyState(model, max_symbols_per_frame)
        for t in range(frames.shape[0]):
            state.consume_frame(frames[t], t)
        return state.result()


@dataclass
class _Hyp:
    tokens: tuple
    t: int
    syms: int                  # labels emitted at the current frame
    lse: float                 # merged log score
    best_path: float           # best single-path score (carries emits)
    emits: tuple
    pred: object


def _merge(pool, key, hyp):
    old = pool.get(key)
    if old is None:
        pool[key] = hyp
        return
    old.lse = np.logaddexp(old.lse, hyp.lse)
    if hyp.best_path > old.best_path:
        old.best_path = hyp.best_path
        old.emits = hyp.emits
        old.pred = hyp.pred


def beam_decode(e, model, beam, max_symbols_per_frame=4):
    """Breadth-limited search merging duplicate label sequences by LSE."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    with T.no_grad():
        frames = e.features.data
        n_t = frames.shape[0]
        if n_t == 0:
            return DecodeResult([], [], 0.0)
        start = _Hyp((), 0, 0, 0.0, 0.0, (), _pred_start(model))
        active = {((), 0, 0): start}
        finished = {}
        while active:
            nxt = {}
            for hyp in active.values():
                logp = _log_softmax_vec(
                    _joint_vec(model, frames[hyp.t], hyp.pred.out))
                # blank: advance time; past the last frame the hypothesis is
                # done but still competes for a beam slot this round
                b_t = hyp.t + 1
                _merge(nxt, (hyp.tokens, b_t, 0),
                       _Hyp(hyp.tokens, b_t, 0, hyp.lse + logp[0],
                            hyp.best_path + logp[0], hyp.emits,
                            hyp.pred if b_t < n_t else None))
                if hyp.syms < max_symbols_per_frame:
                    for k in range(1, logp.shape[0]):
                        toks = hyp.tokens + (k,)
                        _merge(nxt, (toks, hyp.t, hyp.syms + 1),
                               _Hyp(toks, hyp.t, hyp.syms + 1,
                                    hyp.lse + logp[k],
                                    hyp.best_path + logp[k],
                                    hyp.emits + (hyp.t,),
                                    _pred_step(model, hyp.pred, k)))
            ranked = sorted(nxt.values(),
                            key=lambda h: (-h.lse, len(h.tokens), h.tokens))
            active = {}
            for h in ranked[:beam]:
                if h.t == n_t:
                    _merge(finished, h.tokens, h)
                else:
                    active[(h.tokens, h.t, h.syms)] = h
        best = min(finished.values(),
                   key=lambda h: (-h.lse, len(h.tokens), h.tokens))
        return DecodeResult(list(best.tokens), list(best.emits), best.lse)


def decode_dual(feats, model, mode, beam=0, max_symbols_per_frame=4):
    """Decode from the causal or the non-causal encoder output with the one
    shared decoder; beam=0 selects greedy."""
    with T.no_grad():
        enc = model.encode(feats, mode)
        if beam == 0:
            return greedy_decode(enc, model, max_symbols_per_frame)
        return beam_decode(enc, model, beam, max_symbols_per_frame)


class StreamingSession:
    """Feed input frames one at a time; emissions appear as soon as the
    encoder frame they depend on is fully determined.

    The partial hypothesis after t pushed frames equals the offline causal
    greedy decode of the t-frame prefix (restricted to complete frames).
    """

    def __init__(self, model, max_symbols_per_frame=4):
        self.model = model
        self.frames = []
        self.consumed = 0
        self.state = _GreedyState(model, max_symbols_per_frame)
        self.partial_log = []      # (input frame index, hypothesis snapshot)
        self._finalized = False

    def _complete_encoder_frames(self):
        cfg = self.model.config
        n = len(self.frames)
        if n < cfg.stack:
            return 0
        stacked = (n - cfg.stack) // cfg.stride + 1
        if cfg.total_reduction == cfg.stride * 2:
            return stacked // 2
        return stacked

    def _encode_prefix(self):
        feats = FeatureSequence(np.asarray(self.frames),
                                frame_period_ms=10.0)
        with T.no_grad():
            return self.model.encode_causal(feats).features.data

    def push(self, frame):
        if self._finalized:
            raise RuntimeError("session already finalized")
        frame = np.asarray(frame, dtype=float)
        if frame.shape != (self.model.config.feature_dim,):
            raise T.DimensionError(
                "frame dim %s != model feature dim %d"
                % (frame.shape, self.model.config.feature_dim))
        self.frames.append(frame)
        emitted = []
        target = self._complete_encoder_frames()
        if target > self.consumed:
            enc = self._encode_prefix()
            for t in range(self.consumed, target):
                emitted.extend(self.state.consume_frame(enc[t], t))
            self.consumed = target
        self.partial_log.append((len(self.frames) - 1,
                                 tuple(self.state.tokens)))
        return emitted

    def finalize(self):
        """Flush the padded tail frames and return the final result."""
        self._finalized = True
        if not self.frames:
            return DecodeResult([], [], 0.0)
        enc = self._encode_prefix()
        for t in range(self.consumed, enc.shape[0]):
            self.state.consume_frame(enc[t], t)
        self.consumed = enc.shape[0]
        self.partial_log.append((len(self.frames) - 1,
                                 tuple(self.state.tokens)))
        return self.state.result()

    def hypothesis_change_log(self):
        """Input frame index at which the partial hypothesis last changed."""
        last_change = 0
        prev = ()
        for idx, hyp in self.partial_log:
            if hyp != prev:
                last_change = idx
                prev = hyp
        return last_change
