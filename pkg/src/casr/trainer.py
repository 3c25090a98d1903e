"""Mini-batch training with per-utterance path sampling, Adam, gradient
clipping, and bit-exact binary checkpoints.

One master seed fans out to named sub-streams so changing one knob does not
shift the others: `init` drives parameter initialization and `train` drives
both batch selection and path sampling. Only the train stream advances
after step 0, and its PCG64 state rides along in the checkpoint, which is
what makes resumed runs replay uninterrupted ones exactly.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from casr import tensor as T
from casr.model import Model, ModelConfig
from casr.transducer import combined_loss

CHECKPOINT_MAGIC = b"CASR"
CHECKPOINT_VERSION = 1
_U64 = (1 << 64) - 1


class DivergenceError(RuntimeError):
    """Raised when the batch loss exceeds the divergence guard."""


@dataclass
class TrainConfig:
    lam: float = 0.5               # causal-path rate, "lambda" in JSON
    beta: float = 0.0              # low-latency regularizer weight
    strategy: str = "sampled"      # sampled | weighted
    learning_rate: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 8
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.strategy not in ("sampled", "weighted"):
            raise ValueError("unknown strategy %r" % (self.strategy,))
        for name in ("learning_rate", "adam_beta1", "adam_beta2",
                     "adam_eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % (name,))
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def clip_global_norm(grads, clip_norm):
    """Scale the whole gradient dict so its global L2 norm caps at
    clip_norm; returns (grads, pre-clip norm). Summation order is fixed
    (sorted names) for determinism."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    norm = float(np.sqrt(total))
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


def init_moments(params):
    moments = {}
    for name in sorted(params):
        moments[name + "/m"] = np.zeros_like(params[name].data)
        moments[name + "/v"] = np.zeros_like(params[name].data)
    return moments


def adam_step(params, grads, moments, config, step):
    """Bias-corrected Adam update, in place on params and moments."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_eps
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name].data)
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient for parameter %r" % (name,))
        m = moments[name + "/m"]
        v = moments[name + "/v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        params[name].data = params[name].data \
            - lr * m_hat / (np.sqrt(v_hat) + eps)


def _slice_entry(entry):
    """Batch entries are (feats, tokens) or (feats, tokens, num_frames);
    frames past num_frames are padding and are dropped before encoding."""
    from casr.frontend import FeatureSequence
    if len(entry) == 2:
        return entry[0], entry[1]
    feats, tokens, num_frames = entry
    if num_frames < feats.frames.shape[0]:
        feats = FeatureSequence(feats.frames[:num_frames],
                                frame_period_ms=feats.frame_period_ms)
    return feats, tokens


def train_step(batch, model, moments, config, rng, step):
    """One optimization step over a batch of utterances.

    Returns {step, loss, mode, grad_norm}; mode holds per-path utterance
    counts. Raises DivergenceError when the mean loss passes 1e6.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    T.reset_tape()
    counts = {"causal": 0, "noncausal": 0, "weighted": 0}
    total = None
    for entry in batch:
        feats, tokens = _slice_entry(entry)
        loss, mode = combined_loss(feats, tokens, model, config.lam,
                                   config.beta, rng, config.strategy)
        counts[mode] += 1
        total = loss if total is None else T.add(total, loss)
    mean_loss = T.mul(total, 1.0 / len(batch))
    value = float(mean_loss.data)
    if not np.isfinite(value) or value > 1e6:
        raise DivergenceError("loss %g tripped the divergence guard" % value)
    T.backward(mean_loss)
    grads = {}
    for name in sorted(model.params):
        p = model.params[name]
        grads[name] = p.grad if p.grad is not None \
            else np.zeros_like(p.data)
        p.grad = None
    grads, norm = clip_global_norm(grads, config.clip_norm)
    adam_step(model.params, grads, moments, config, step)
    T.reset_tape()
    mode = {k: v for k, v in counts.items() if v}
    return {"step": step, "loss": value, "mode": mode, "grad_norm": norm}


class Trainer:
    """Drives train_step over a fixed in-memory dataset of
    (FeatureSequence, tokens) pairs."""

    def __init__(self, model, dataset, config, rng=None, moments=None,
                 step=0):
        if not dataset:
            raise ValueError("dataset must be non-empty")
        self.model = model
        self.dataset = list(dataset)
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(
            np.random.SeedSequence([config.seed, 1]))
        self.moments = moments if moments is not None \
            else init_moments(model.params)
        self.step = step

    def _draw_batch(self):
        n = len(self.dataset)
        return [self.dataset[int(self.rng.random() * n)]
                for _ in range(self.config.batch_size)]

    def step_once(self):
        self.step += 1
        return train_step(self._draw_batch(), self.model, self.moments,
                          self.config, self.rng, self.step)

    def run(self, steps, log_fn=None):
        records = []
        for _ in range(steps):
            rec = self.step_once()
            records.append(rec)
            if log_fn is not None:
                log_fn(rec)
        return records


# ---------------------------------------------------------------------------
# checkpoint persistence


def _pack_rng_state(rng):
    st = rng.bit_generator.state["state"]
    s, inc = st["state"], st["inc"]
    return (s & _U64, (s >> 64) & _U64, inc & _U64, (inc >> 64) & _U64)


def _restore_rng_state(words):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": words[0] | (words[1] << 64),
                  "inc": words[2] | (words[3] << 64)},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return rng


@dataclass
class CheckpointState:
    step: int
    config: dict               # {"model": ..., "train": ...}
    tensors: dict              # name -> float64 ndarray (params + moments)
    rng_words: tuple


def save_checkpoint(path, model, train_config, moments, rng, step):
    tensors = {name: p.data for name, p in model.params.items()}
    tensors.update(moments)
    config = {"model": model.config.to_dict(),
              "train": train_config.to_dict()}
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", step)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    blob += struct.pack("<4Q", *_pack_rng_state(rng))
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise ValueError("%s: truncated at byte %d (need %d more)"
                             % (self.path, self.pos,
                                self.pos + size - len(self.raw)))
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def take_bytes(self, n):
        if self.pos + n > len(self.raw):
            raise ValueError("%s: truncated at byte %d" % (self.path,
                                                           self.pos))
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("%s: bad checkpoint magic at byte 0" % (path,))
    r = _Reader(raw, path)
    r.pos = 4
    (version,) = r.take("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError("%s: unsupported checkpoint version %d at byte 4"
                         % (path, version))
    (step,) = r.take("<Q")
    (cfg_len,) = r.take("<I")
    config = json.loads(r.take_bytes(cfg_len).decode("utf-8"))
    (count,) = r.take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        name = r.take_bytes(name_len).decode("utf-8")
        (rank,) = r.take("<B")
        shape = tuple(r.take("<%dI" % rank)) if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take_bytes(8 * n), dtype="<f8").copy()
        tensors[name] = data.reshape(shape)
    rng_words = r.take("<4Q")
    return CheckpointState(step, config, tensors, rng_words)


def restore_state(state):
    """Split a CheckpointState into (model, train_config, moments, rng)."""
    model_config = ModelConfig(**state.config["model"])
    train_config = TrainConfig.from_dict(state.config["train"])
    params = {}
    moments = {}
    for name, arr in state.tensors.items():
        if name.endswith("/m") or name.endswith("/v"):
            moments[name] = arr
        else:
            params[name] = T.Tensor(arr, requires_grad=True)
    model = Model(model_config, params=params)
    rng = _restore_rng_state(state.rng_words)
    return model, train_config, moments, rng


def trainer_from_checkpoint(path, dataset):
    """Rebuild a Trainer whose future steps replay the saved run."""
    state = load_checkpoint(path)
    model, train_config, moments, rng = restore_state(state)
    return Trainer(model, dataset, train_config, rng=rng, moments=moments,
                   step=state.step)
