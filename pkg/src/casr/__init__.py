"""casr: a desk-scale cascaded-encoders transducer toolkit.

A causal encoder and a cascaded non-causal encoder feed one shared
transducer decoder; the model trains with stochastic path sampling and an
optional causal-path latency regularizer, and decodes in streaming or
offline mode.
"""

__version__ = "0.1.0"

from casr.tensor import Tensor, Tape, backward, reset_tape, no_grad  # noqa: F401
