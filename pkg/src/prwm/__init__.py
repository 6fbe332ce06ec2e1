"""World-model continual learning with pseudo-rehearsal, in plain numpy.

V (a convolutional VAE) compresses frames to latents, M (an LSTM with a
mixture-density head) models latent dynamics, reward and termination, and C
(an actor-critic) acts on [z, h].  Frozen copies M*, C* dream rollouts that are
interleaved with new data so earlier tasks are not forgotten.
"""

__version__ = "0.1.0"
