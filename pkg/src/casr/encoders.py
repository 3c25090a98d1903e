"""Causal encoder, cascaded non-causal encoder, and their building blocks.

The causal stack (unidirectional LSTMs or right-context-free conformer
layers) maps input features to e_s; the non-causal stack (bidirectional
LSTMs or conformer layers with a bounded right-context window) runs in
cascade on e_s to produce e_a over the same time axis.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from casr import tensor as T


@dataclass
class EncoderConfig:
    causal_kind: str = "lstm"            # lstm | conformer
    causal_layers: int = 2
    noncausal_kind: str = "bilstm"       # bilstm | conformer | identity
    noncausal_layers: int = 1
    hidden_units: int = 24
    proj_units: int = 16
    attn_heads: int = 2
    conv_kernel: int = 3
    right_context_frames: int = 2        # per non-causal conformer layer
    time_reduction_after_layer: Optional[int] = None
    max_positions: int = 512

    def __post_init__(self):
        if self.causal_kind not in ("lstm", "conformer"):
            raise ValueError("bad causal_kind %r" % (self.causal_kind,))
        if self.noncausal_kind not in ("bilstm", "conformer", "identity"):
            raise ValueError("bad noncausal_kind %r" % (self.noncausal_kind,))
        uses_conformer = (self.causal_kind == "conformer"
                          or self.noncausal_kind == "conformer")
        if uses_conformer and self.proj_units % self.attn_heads != 0:
            raise ValueError("proj_units %d not divisible by attn_heads %d"
                             % (self.proj_units, self.attn_heads))
        if self.right_context_frames < 0:
            raise ValueError("right_context_frames must be >= 0")
        if (self.noncausal_kind == "conformer"
                and self.right_context_frames > 0
                and (self.conv_kernel - 1) // 2 > self.right_context_frames):
            raise ValueError("conv right reach exceeds the context window")

    @property
    def conv_right_reach(self):
        """Right reach of the centered conv in non-causal conformer layers."""
        return (self.conv_kernel - 1) // 2

    @property
    def cascade_lookahead_frames(self):
        """Total right lookahead of the non-causal stack, in encoder frames."""
        if self.noncausal_kind != "conformer":
            return None if self.noncausal_kind == "bilstm" else 0
        return self.noncausal_layers * (self.right_context_frames
                                        + self.conv_right_reach)


@dataclass
class EncoderOutput:
    features: T.Tensor            # T_e x p
    frame_period_ms: float
    mode: str                     # causal | noncausal


# ---------------------------------------------------------------------------
# parameter initialization

def _uniform(rng, shape, fan_in):
    s = 1.0 / math.sqrt(max(1, fan_in))
    return T.Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_lstm_params(rng, in_dim, hidden, proj, prefix):
    """Gate layout along the 4h axis is [input, forget, cell, output]."""
    b = rng.uniform(-1.0 / math.sqrt(hidden), 1.0 / math.sqrt(hidden),
                    size=4 * hidden)
    b[hidden:2 * hidden] += 1.0
    return {
        prefix + "/Wx": _uniform(rng, (in_dim, 4 * hidden), in_dim),
        prefix + "/Wh": _uniform(rng, (proj, 4 * hidden), proj),
        prefix + "/b": T.Tensor(b, requires_grad=True),
        prefix + "/Wp": _uniform(rng, (hidden, proj), hidden),
    }


def init_bilstm_params(rng, in_dim, hidden, proj, prefix):
    params = {}
    params.update(init_lstm_params(rng, in_dim, hidden, proj, prefix + "/fwd"))
    params.update(init_lstm_params(rng, in_dim, hidden, proj, prefix + "/bwd"))
    params[prefix + "/Wc"] = _uniform(rng, (2 * proj, proj), 2 * proj)
    params[prefix + "/bc"] = T.Tensor(np.zeros(proj), requires_grad=True)
    return params


def init_attention_params(rng, p, prefix):
    return {
        prefix + "/Wq": _uniform(rng, (p, p), p),
        prefix + "/Wk": _uniform(rng, (p, p), p),
        prefix + "/Wv": _uniform(rng, (p, p), p),
        prefix + "/Wo": _uniform(rng, (p, p), p),
        prefix + "/bo": T.Tensor(np.zeros(p), requires_grad=True),
    }


def _init_ln(p, prefix):
    return {prefix + "/g": T.Tensor(np.ones(p), requires_grad=True),
            prefix + "/b": T.Tensor(np.zeros(p), requires_grad=True)}


def init_conformer_params(rng, p, kernel, prefix, ffn_mult=2):
    params = {}
    h = ffn_mult * p
    for name in ("ffn1", "ffn2"):
        params[prefix + "/%s/W1" % name] = _uniform(rng, (p, h), p)
        params[prefix + "/%s/b1" % name] = T.Tensor(np.zeros(h),
                                                    requires_grad=True)
        params[prefix + "/%s/W2" % name] = _uniform(rng, (h, p), h)
        params[prefix + "/%s/b2" % name] = T.Tensor(np.zeros(p),
                                                    requires_grad=True)
    params.update(init_attention_params(rng, p, prefix + "/attn"))
    params[prefix + "/conv/kernel"] = _uniform(rng, (kernel, p), kernel)
    params[prefix + "/conv/Wpw"] = _uniform(rng, (p, p), p)
    params[prefix + "/conv/bpw"] = T.Tensor(np.zeros(p), requires_grad=True)
    for ln in ("ln1", "ln2", "ln3", "ln4", "ln5"):
        params.update(_init_ln(p, prefix + "/" + ln))
    return params


def init_time_reduce_params(rng, p, prefix):
    return {prefix + "/W": _uniform(rng, (2 * p, p), 2 * p),
            prefix + "/b": T.Tensor(np.zeros(p), requires_grad=True)}


def init_linear_params(rng, in_dim, out_dim, prefix):
    return {prefix + "/W": _uniform(rng, (in_dim, out_dim), in_dim),
            prefix + "/b": T.Tensor(np.zeros(out_dim), requires_grad=True)}


# ---------------------------------------------------------------------------
# layer forwards

def rowwise_matmul(x, w):
    """x @ w computed one row at a time.

    A batched T x d matmul may round a given output row differently for
    different T (BLAS picks kernels by operand shape), which would break
    bit-exact prefix equivalence along the time axis. Computing each row
    through the same (1, d) call makes row t independent of T.
    """
    return T.concat([T.matmul(T.narrow(x, 0, i, 1), w)
                     for i in range(x.shape[0])], axis=0)


def lstm_layer_forward(x, params, prefix, direction="fwd"):
    """One projected-LSTM layer over a T x d input; zero initial state.

    `bwd` runs over time-reversed input and re-reverses the output.
    """
    Wx = params[prefix + "/Wx"]
    Wh = params[prefix + "/Wh"]
    b = params[prefix + "/b"]
    Wp = params[prefix + "/Wp"]
    if x.shape[1] != Wx.shape[0]:
        raise T.DimensionError("lstm input dim %d != Wx rows %d"
                               % (x.shape[1], Wx.shape[0]))
    hidden = Wp.shape[0]
    proj = Wp.shape[1]
    n = x.shape[0]
    h = T.zeros((1, proj))
    c = T.zeros((1, hidden))
    order = range(n) if direction == "fwd" else range(n - 1, -1, -1)
    rows = []
    for t_idx in order:
        xw = T.matmul(T.narrow(x, 0, t_idx, 1), Wx)
        gates = T.add(T.add(xw, T.matmul(h, Wh)), b)
        i = T.sigmoid(T.narrow(gates, 1, 0, hidden))
        f = T.sigmoid(T.narrow(gates, 1, hidden, hidden))
        g = T.tanh(T.narrow(gates, 1, 2 * hidden, hidden))
        o = T.sigmoid(T.narrow(gates, 1, 3 * hidden, hidden))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.matmul(T.mul(o, T.tanh(c)), Wp)
        rows.append(h)
    if direction == "bwd":
        rows.reverse()
    return T.concat(rows, axis=0)


def bilstm_layer_forward(x, params, prefix):
    hf = lstm_layer_forward(x, params, prefix + "/fwd", "fwd")
    hb = lstm_layer_forward(x, params, prefix + "/bwd", "bwd")
    cat = T.concat([hf, hb], axis=1)
    return T.add(T.matmul(cat, params[prefix + "/Wc"]),
                 params[prefix + "/bc"])


def masked_self_attention(x, params, prefix, heads, left, right):
    """Multi-head scaled dot-product attention over a context window.

    Position t attends to [max(0, t-left), min(n-1, t+right)]. The window
    is realized by narrowing keys and values per row rather than by an
    additive mask, so the computation for row t has shapes that depend only
    on t and the window, never on the sequence length; this keeps the
    causal variant bit-exactly prefix-equivalent.
    """
    p = x.shape[1]
    if p % heads != 0:
        raise T.DimensionError("width %d not divisible by %d heads"
                               % (p, heads))
    dh = p // heads
    n = x.shape[0]
    q = rowwise_matmul(x, params[prefix + "/Wq"])
    k = rowwise_matmul(x, params[prefix + "/Wk"])
    v = rowwise_matmul(x, params[prefix + "/Wv"])
    scale = 1.0 / math.sqrt(dh)
    rows = []
    for t_idx in range(n):
        lo = 0
        if left is not None and not math.isinf(left):
            lo = max(0, t_idx - int(left))
        hi = n - 1 if math.isinf(right) else min(n - 1, t_idx + int(right))
        width = hi - lo + 1
        ctx = []
        for h in range(heads):
            qh = T.narrow(T.narrow(q, 0, t_idx, 1), 1, h * dh, dh)
            kh = T.narrow(T.narrow(k, 0, lo, width), 1, h * dh, dh)
            vh = T.narrow(T.narrow(v, 0, lo, width), 1, h * dh, dh)
            scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
            ctx.append(T.matmul(T.softmax(scores, axis=-1), vh))
        rows.append(T.concat(ctx, axis=1))
    out = T.concat(rows, axis=0)
    return T.add(rowwise_matmul(out, params[prefix + "/Wo"]),
                 params[prefix + "/bo"])


def _ffn(x, params, prefix):
    h = T.swish(T.add(rowwise_matmul(x, params[prefix + "/W1"]),
                      params[prefix + "/b1"]))
    return T.add(rowwise_matmul(h, params[prefix + "/W2"]),
                 params[prefix + "/b2"])


def _ln(x, params, prefix):
    return T.layer_norm(x, params[prefix + "/g"], params[prefix + "/b"])


def conformer_layer_forward(x, params, prefix, heads, right_context):
    """Half-FFN, masked attention, conv module, half-FFN, final layer norm.

    With right_context == 0 every sub-block is strictly causal (left-padded
    conv); otherwise the conv is centered and its right reach counts against
    the layer's context budget.
    """
    h = T.add(x, T.mul(_ffn(_ln(x, params, prefix + "/ln1"),
                            params, prefix + "/ffn1"), 0.5))
    h = T.add(h, masked_self_attention(
        _ln(h, params, prefix + "/ln2"), params, prefix + "/attn",
        heads, math.inf, right_context))
    padding = "causal" if right_context == 0 else "same"
    conv = T.depthwise_conv1d(_ln(h, params, prefix + "/ln3"),
                              params[prefix + "/conv/kernel"], padding)
    conv = T.add(rowwise_matmul(T.swish(conv), params[prefix + "/conv/Wpw"]),
                 params[prefix + "/conv/bpw"])
    h = T.add(h, conv)
    h = T.add(h, T.mul(_ffn(_ln(h, params, prefix + "/ln4"),
                            params, prefix + "/ffn2"), 0.5))
    return _ln(h, params, prefix + "/ln5")


def time_reduce(x, params, prefix):
    """Pair adjacent frames (zero-pad odd tail) and map 2p back to p."""
    n, p = x.shape
    n_out = -(-n // 2)
    even = T.gather_rows(x, np.arange(0, n, 2))
    odd_idx = np.arange(1, n, 2)
    odd = T.gather_rows(x, odd_idx)
    if len(odd_idx) < n_out:
        odd = T.concat([odd, T.zeros((1, p))], axis=0)
    pairs = T.concat([even, odd], axis=1)
    return T.add(rowwise_matmul(pairs, params[prefix + "/W"]),
                 params[prefix + "/b"])


# ---------------------------------------------------------------------------
# full stacks

def init_causal_params(rng, config, in_dim):
    """Parameters for the causal stack reading stacked features of width in_dim."""
    params = {}
    p = config.proj_units
    if config.causal_layers == 0:
        return params
    if config.causal_kind == "lstm":
        d = in_dim
        for i in range(config.causal_layers):
            params.update(init_lstm_params(
                rng, d, config.hidden_units, p, "causal/l%d" % i))
            d = p
            if config.time_reduction_after_layer == i:
                params.update(init_time_reduce_params(rng, p, "causal/tr"))
    else:
        params.update(init_linear_params(rng, in_dim, p, "causal/in"))
        params["causal/pos"] = _uniform(rng, (config.max_positions, p), p)
        for i in range(config.causal_layers):
            params.update(init_conformer_params(
                rng, p, config.conv_kernel, "causal/l%d" % i))
            if config.time_reduction_after_layer == i:
                params.update(init_time_reduce_params(rng, p, "causal/tr"))
    return params


def init_cascade_params(rng, config, in_dim):
    params = {}
    p = config.proj_units
    if config.noncausal_kind == "identity":
        return params
    if config.noncausal_kind == "bilstm":
        d = in_dim
        for i in range(config.noncausal_layers):
            params.update(init_bilstm_params(
                rng, d, config.hidden_units, p, "cascade/l%d" % i))
            d = p
    else:
        if in_dim != p:
            params.update(init_linear_params(rng, in_dim, p, "cascade/in"))
        params["cascade/pos"] = _uniform(rng, (config.max_positions, p), p)
        for i in range(config.noncausal_layers):
            params.update(init_conformer_params(
                rng, p, config.conv_kernel, "cascade/l%d" % i))
    return params


def _add_positions(x, params, key):
    pos = params[key]
    if x.shape[0] > pos.shape[0]:
        raise T.DimensionError(
            "sequence length %d exceeds max_positions %d"
            % (x.shape[0], pos.shape[0]))
    return T.add(x, T.narrow(pos, 0, 0, x.shape[0]))


def causal_encode(feats, config, params):
    """Run the causal stack on stacked features; strictly causal end to end."""
    x = T.Tensor(feats.frames) if not isinstance(feats.frames, T.Tensor) \
        else feats.frames
    period = feats.frame_period_ms
    if config.causal_layers == 0:
        return EncoderOutput(x, period, "causal")
    if config.causal_kind == "lstm":
        for i in range(config.causal_layers):
            x = lstm_layer_forward(x, params, "causal/l%d" % i, "fwd")
            if config.time_reduction_after_layer == i:
                x = time_reduce(x, params, "causal/tr")
                period *= 2
    else:
        x = T.add(rowwise_matmul(x, params["causal/in/W"]),
                  params["causal/in/b"])
        x = _add_positions(x, params, "causal/pos")
        for i in range(config.causal_layers):
            x = conformer_layer_forward(x, params, "causal/l%d" % i,
                                        config.attn_heads, 0)
            if config.time_reduction_after_layer == i:
                x = time_reduce(x, params, "causal/tr")
                period *= 2
    return EncoderOutput(x, period, "causal")


def cascade_encode(e_s, config, params):
    """Run the non-causal stack on causal output; no further time reduction."""
    if e_s.mode != "causal":
        raise ValueError("cascade_encode requires a causal-mode input, got %r"
                         % (e_s.mode,))
    x = e_s.features
    if config.noncausal_kind == "identity" or config.noncausal_layers == 0:
        return EncoderOutput(x, e_s.frame_period_ms, "noncausal")
    if config.noncausal_kind == "bilstm":
        for i in range(config.noncausal_layers):
            x = bilstm_layer_forward(x, params, "cascade/l%d" % i)
    else:
        if "cascade/in/W" in params:
            x = T.add(T.matmul(x, params["cascade/in/W"]),
                      params["cascade/in/b"])
        x = _add_positions(x, params, "cascade/pos")
        for i in range(config.noncausal_layers):
            x = conformer_layer_forward(x, params, "cascade/l%d" % i,
                                        config.attn_heads,
                                        config.right_context_frames)
    return EncoderOutput(x, e_s.frame_period_ms, "noncausal")
