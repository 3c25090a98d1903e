"""Synthetic toy-speech generation and the frame stacking/subsampling pipeline.

Each vocabulary token renders as a run of noisy copies of a fixed per-token
mean vector; inter-utterance silence is all-zero frames. Stacking
concatenates `stack` consecutive frames and subsamples time by `stride`,
which is the input pipeline of the encoders.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class FeatureSequence:
    frames: np.ndarray            # T x d float64
    frame_period_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a T x d matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class SynthTaskSpec:
    vocab_size: int = 6
    feature_dim: int = 6
    frames_per_token: int = 4
    duration_jitter: int = 1
    noise_sigma: float = 0.5
    seed: int = 0
    frame_period_ms: float = 10.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.duration_jitter < 0 or self.noise_sigma < 0:
            raise ValueError("jitter and noise_sigma must be >= 0")

    def token_mean(self, token):
        """Deterministic per-token mean vector derived from (seed, token)."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, token]))
        return rng.standard_normal(self.feature_dim)


def check_tokens(tokens, vocab_size):
    for tok in tokens:
        if not 1 <= tok <= vocab_size:
            raise ValueError(
                "token id %d outside [1, %d] (0 is reserved for blank)"
                % (tok, vocab_size))
    return list(int(t) for t in tokens)


def synth_utterance(spec, length_tokens, rng):
    """Render a random token sequence to noisy frames.

    Returns (features, tokens, token_end_frames); end frames are the
    last-frame index of each token, the ground truth for latency metrics.
    """
    if length_tokens < 0:
        raise ValueError("length_tokens must be >= 0")
    if length_tokens == 0:
        return (FeatureSequence(np.zeros((1, spec.feature_dim)),
                                spec.frame_period_ms), [], [])
    tokens = [int(rng.integers(1, spec.vocab_size + 1))
              for _ in range(length_tokens)]
    chunks = []
    end_frames = []
    total = 0
    for tok in tokens:
        dur = spec.frames_per_token
        if spec.duration_jitter:
            dur += int(rng.integers(-spec.duration_jitter,
                                    spec.duration_jitter + 1))
        dur = max(1, dur)
        mu = spec.token_mean(tok)
        block = np.tile(mu, (dur, 1))
        if spec.noise_sigma > 0:
            block = block + spec.noise_sigma * rng.standard_normal(block.shape)
        chunks.append(block)
        total += dur
        end_frames.append(total - 1)
    return (FeatureSequence(np.concatenate(chunks, axis=0),
                            spec.frame_period_ms), tokens, end_frames)


def synth_longform(spec, n_utterances, tokens_each, silence_frames, rng):
    """Concatenate utterances with all-zero silence gaps between them."""
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    frames = []
    tokens = []
    end_frames = []
    offset = 0
    for i in range(n_utterances):
        feats, toks, ends = synth_utterance(spec, tokens_each, rng)
        if i > 0 and silence_frames > 0:
            frames.append(np.zeros((silence_frames, spec.feature_dim)))
            offset += silence_frames
        frames.append(feats.frames)
        tokens.extend(toks)
        end_frames.extend(e + offset for e in ends)
        offset += feats.num_frames
    return (FeatureSequence(np.concatenate(frames, axis=0),
                            spec.frame_period_ms), tokens, end_frames)


def stack_and_subsample(x, stack, stride):
    """Concatenate `stack` frames starting at t*stride (zero-padded tail).

    T' = ceil(T/stride), d' = stack*d, frame period multiplies by stride.
    """
    if stack < 1 or stride < 1:
        raise ValueError("stack and stride must be >= 1")
    T, d = x.frames.shape
    T_out = -(-T // stride)
    padded = np.zeros((T + stack, d))
    padded[:T] = x.frames
    out = np.zeros((T_out, stack * d))
    for j in range(stack):
        rows = np.arange(T_out) * stride + j
        out[:, j * d:(j + 1) * d] = padded[rows]
    return FeatureSequence(out, x.frame_period_ms * stride)


# ---------------------------------------------------------------------------
# on-disk dataset format

FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1


def write_feature_file(path, feats):
    T, d = feats.frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIId", FEATURE_VERSION, T, d,
                            feats.frame_period_ms))
        f.write(feats.frames.astype("<f4").tobytes())


def read_feature_file(path):
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError("%s: bad feature-file magic at byte 0" % (path,))
    version, T, d, period = struct.unpack_from("<IIId", raw, 4)
    if version != FEATURE_VERSION:
        raise ValueError("%s: unsupported feature version %d" % (path, version))
    need = 24 + 4 * T * d
    if len(raw) < need:
        raise ValueError("%s: truncated at byte %d (need %d)"
                         % (path, len(raw), need))
    vals = np.frombuffer(raw, dtype="<f4", count=T * d, offset=24)
    return FeatureSequence(vals.astype(np.float64).reshape(T, d), period)


@dataclass
class ManifestRecord:
    id: str
    feature_file: str
    tokens: list = field(default_factory=list)
    end_frames: list = field(default_factory=list)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({
                "id": rec.id,
                "feature_file": rec.feature_file,
                "transcript": " ".join(str(t) for t in rec.tokens),
                "end_frames": list(rec.end_frames),
            }) + "\n")


def read_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            transcript = obj["transcript"].split() if obj["transcript"] else []
            records.append(ManifestRecord(
                id=obj["id"],
                feature_file=obj["feature_file"],
                tokens=[int(t) for t in transcript],
                end_frames=[int(e) for e in obj["end_frames"]],
            ))
    return records


def load_record_features(manifest_path, record):
    base = Path(manifest_path).parent
    return read_feature_file(base / record.feature_file)
