"""Full cascaded-encoders transducer model: parameters plus forward passes."""

from dataclasses import dataclass, field

import numpy as np

from casr import encoders, frontend, transducer


@dataclass
class ModelConfig:
    vocab_size: int = 6
    feature_dim: int = 6
    stack: int = 2
    stride: int = 2
    embed_units: int = 8
    pred_hidden: int = 16
    pred_proj: int = 16
    joint_units: int = 16
    encoder: encoders.EncoderConfig = field(
        default_factory=encoders.EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = encoders.EncoderConfig(**self.encoder)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.stack < 1 or self.stride < 1:
            raise ValueError("stack and stride must be >= 1")

    @property
    def stacked_dim(self):
        return self.stack * self.feature_dim

    @property
    def total_reduction(self):
        """Input frames per final encoder frame."""
        r = self.stride
        if (self.encoder.time_reduction_after_layer is not None
                and self.encoder.causal_layers
                > self.encoder.time_reduction_after_layer):
            r *= 2
        return r

    @property
    def encoder_output_dim(self):
        if self.encoder.causal_layers == 0:
            return self.stacked_dim
        return self.encoder.proj_units

    def to_dict(self):
        d = dict(self.__dict__)
        d["encoder"] = dict(self.encoder.__dict__)
        return d


class Model:
    """Immutable-parameter snapshot with tape-recorded forward passes."""

    def __init__(self, config, seed=None, params=None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE11C]))
            params = {}
            params.update(encoders.init_causal_params(
                rng, config.encoder, config.stacked_dim))
            params.update(encoders.init_cascade_params(
                rng, config.encoder, self.config.encoder_output_dim))
            params.update(transducer.init_prediction_params(
                rng, config.vocab_size, config.embed_units,
                config.pred_hidden, config.pred_proj))
            params.update(transducer.init_joint_params(
                rng, self.config.encoder_output_dim, config.pred_proj,
                config.joint_units, config.vocab_size))
        self.params = params

    def encode_causal(self, feats):
        stacked = frontend.stack_and_subsample(
            feats, self.config.stack, self.config.stride)
        return encoders.causal_encode(stacked, self.config.encoder,
                                      self.params)

    def encode_cascade(self, e_s):
        return encoders.cascade_encode(e_s, self.config.encoder, self.params)

    def encode(self, feats, mode):
        e_s = self.encode_causal(feats)
        if mode == "causal":
            return e_s
        if mode == "noncausal":
            return self.encode_cascade(e_s)
        raise ValueError("unknown mode %r" % (mode,))

    def pred_forward(self, tokens):
        return transducer.prediction_net_forward(
            tokens, self.params, self.config.vocab_size)

    def joint(self, e, pred):
        return transducer.joint_forward(e, pred, self.params)

    def param_names(self):
        return sorted(self.params)
