"""Prediction network, joint network, and the transducer alignment loss.

The loss marginalizes over every monotone blank/label interleaving on the
T x (U+1) lattice (terminal blank required) with a custom alpha/beta
gradient; the optional low-latency regularizer scales the gradient flowing
through label-emission arcs by (1 + lambda) on the causal path only.
"""

import math
from dataclasses import dataclass

import numpy as np

from casr import tensor as T
from casr import encoders
from casr.frontend import check_tokens


def init_prediction_params(rng, vocab_size, embed, hidden, proj, prefix="pred"):
    params = {prefix + "/embed": encoders._uniform(
        rng, (vocab_size + 1, embed), embed)}
    params.update(encoders.init_lstm_params(rng, embed, hidden, proj,
                                            prefix + "/lstm"))
    return params


def init_joint_params(rng, enc_dim, pred_dim, joint_units, vocab_size,
                      prefix="joint"):
    return {
        prefix + "/We": encoders._uniform(rng, (enc_dim, joint_units), enc_dim),
        prefix + "/Wp": encoders._uniform(rng, (pred_dim, joint_units),
                                          pred_dim),
        prefix + "/b": T.Tensor(np.zeros(joint_units), requires_grad=True),
        prefix + "/Wout": encoders._uniform(rng, (joint_units, vocab_size + 1),
                                            joint_units),
        prefix + "/bout": T.Tensor(np.zeros(vocab_size + 1),
                                   requires_grad=True),
    }


def prediction_net_forward(tokens, params, vocab_size, prefix="pred"):
    """State rows for the label prefix; row u follows y_1..y_u, row 0 the
    start state (blank embedding through the LSTM from zeros)."""
    tokens = check_tokens(tokens, vocab_size)
    ids = [0] + tokens
    emb = T.gather_rows(params[prefix + "/embed"], ids)
    return encoders.lstm_layer_forward(emb, params, prefix + "/lstm", "fwd")


def joint_forward(e, pred, params, prefix="joint"):
    """Dense joint: logits(t,u,.) = Wout tanh(We e_t + Wp pred_u + b) + bout."""
    n_t = e.shape[0]
    n_u = pred.shape[0]
    a = T.matmul(e, params[prefix + "/We"])
    b = T.matmul(pred, params[prefix + "/Wp"])
    j = a.shape[1]
    h = T.tanh(T.add(T.add(T.reshape(a, (n_t, 1, j)), b),
                     params[prefix + "/b"]))
    return T.add(T.matmul(h, params[prefix + "/Wout"]),
                 params[prefix + "/bout"])


@dataclass
class Lattice:
    alpha: np.ndarray          # T x (U+1) log forward variables
    beta: np.ndarray           # T x (U+1) log backward variables
    log_likelihood: float


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _lse2(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _forward_backward(logp, y):
    n_t = logp.shape[0]
    U = len(y)
    blank = logp[:, :, 0]
    lab = np.full((n_t, U), -math.inf)
    for u, tok in enumerate(y):
        lab[:, u] = logp[:, u, tok]
    alpha = np.full((n_t, U + 1), -math.inf)
    alpha[0, 0] = 0.0
    for t in range(n_t):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -math.inf
            b = alpha[t, u - 1] + lab[t, u - 1] if u > 0 else -math.inf
            alpha[t, u] = _lse2(a, b)
    ll = alpha[n_t - 1, U] + blank[n_t - 1, U]
    beta = np.full((n_t, U + 1), -math.inf)
    beta[n_t - 1, U] = blank[n_t - 1, U]
    for t in range(n_t - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == n_t - 1 and u == U:
                continue
            a = blank[t, u] + beta[t + 1, u] if t < n_t - 1 else -math.inf
            b = lab[t, u] + beta[t, u + 1] if u < U else -math.inf
            beta[t, u] = _lse2(a, b)
    return alpha, beta, ll


def rnnt_loss(logits, y, fastemit_lambda=0.0):
    """Exact alignment-lattice loss -log P(y | e) with custom gradient.

    Returns (scalar loss tensor, Lattice). `fastemit_lambda` scales the
    label-arc gradient contributions by (1 + lambda); the forward value is
    unaffected.
    """
    if fastemit_lambda < 0:
        raise ValueError("fastemit_lambda must be >= 0")
    data = logits.data
    if data.ndim != 3:
        raise T.DimensionError("joint logits must be T x (U+1) x (V+1)")
    n_t, n_u, n_v = data.shape
    U = len(y)
    if n_u != U + 1:
        raise T.DimensionError(
            "lattice label axis %d != |y|+1 = %d" % (n_u, U + 1))
    if not np.all(np.isfinite(data)):
        raise ValueError("joint logits contain non-finite values")
    y = check_tokens(y, n_v - 1)
    if n_t < 1:
        raise ValueError("infeasible lattice: no encoder frames")
    logp = _log_softmax(data)
    alpha, beta, ll = _forward_backward(logp, y)
    lattice = Lattice(alpha, beta, ll)
    out = T.Tensor(-ll)
    if T._recordable(logits):
        def fn(g):
            scale = float(g)
            occ = np.zeros_like(logp)
            # blank arcs (t,u) -> (t+1,u); terminal blank completes the path
            beta_next = np.full((n_t, n_u), -math.inf)
            if n_t > 1:
                beta_next[:-1] = beta[1:]
            beta_next[n_t - 1, U] = 0.0
            occ[:, :, 0] = np.exp(alpha + logp[:, :, 0] + beta_next - ll)
            # label arcs (t,u) -> (t,u+1), scaled by the latency regularizer
            for u, tok in enumerate(y):
                occ[:, u, tok] += (1.0 + fastemit_lambda) * np.exp(
                    alpha[:, u] + logp[:, u, tok] + beta[:, u + 1] - ll)
            # d(-ll)/dlogits through the log-softmax
            row_tot = occ.sum(axis=-1, keepdims=True)
            dlogits = scale * (np.exp(logp) * row_tot - occ)
            T._acc(logits, dlogits)
        T._record(out, fn)
    return out, lattice


def fastemit_rnnt_loss(logits, y, lambda_fe):
    return rnnt_loss(logits, y, fastemit_lambda=lambda_fe)


def brute_force_loss(logits, y):
    """Oracle: explicit sum over all monotone alignments ending in a blank.

    Guarded to T + U <= 12; returns the same -log P(y|e) as rnnt_loss.
    """
    data = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    n_t, n_u, n_v = data.shape
    U = len(y)
    if n_t + U > 12:
        raise ValueError("brute force refused: T + U = %d > 12" % (n_t + U,))
    if n_u != U + 1:
        raise T.DimensionError(
            "lattice label axis %d != |y|+1 = %d" % (n_u, U + 1))
    logp = _log_softmax(data)
    paths = []

    def walk(t, u, acc):
        if t == n_t - 1 and u == U:
            paths.append(acc + logp[t, u, 0])
            # label moves from the terminal node are not allowed
        if u < U:
            walk(t, u + 1, acc + logp[t, u, y[u]])
        if t < n_t - 1:
            walk(t + 1, u, acc + logp[t, u, 0])

    walk(0, 0, 0.0)
    total = -math.inf
    for p in paths:
        total = _lse2(total, p)
    return -total, len(paths)


def sample_path(lam, rng):
    """'causal' with probability lam, else 'noncausal'."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("sampling rate must lie in [0, 1], got %r" % (lam,))
    return "causal" if rng.random() < lam else "noncausal"


def combined_loss(feats, tokens, model, lam, beta, rng, strategy):
    """Loss over the two processing paths.

    `weighted` is the exact lam * L_s + (1-lam) * L_a; `sampled` evaluates
    one path chosen at rate lam. The latency regularizer `beta` applies to
    the causal-path loss only; gradients flow into the causal encoder from
    both paths (no stop-gradient on the cascade input).
    Returns (loss tensor, mode string: causal|noncausal|weighted).
    """
    if strategy not in ("weighted", "sampled"):
        raise ValueError("unknown strategy %r" % (strategy,))
    e_s = model.encode_causal(feats)
    pred = model.pred_forward(tokens)
    if strategy == "weighted":
        loss_s, _ = rnnt_loss(model.joint(e_s.features, pred), tokens,
                              fastemit_lambda=beta)
        e_a = model.encode_cascade(e_s)
        loss_a, _ = rnnt_loss(model.joint(e_a.features, pred), tokens)
        return T.add(T.mul(loss_s, lam), T.mul(loss_a, 1.0 - lam)), "weighted"
    mode = sample_path(lam, rng)
    if mode == "causal":
        loss, _ = rnnt_loss(model.joint(e_s.features, pred), tokens,
                            fastemit_lambda=beta)
    else:
        e_a = model.encode_cascade(e_s)
        loss, _ = rnnt_loss(model.joint(e_a.features, pred), tokens)
    return loss, mode
