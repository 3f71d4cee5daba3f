"""Desk-scale diffusion posterior sampling over simulated channels.

Modules: distributions (Gaussian-mixture sources), schedule and engine
(noise schedules and samplers), score_net (small trainable score network),
guidance (classifier, classifier-free and measurement guidance), channel
(encoders, AWGN and Rayleigh channels), receiver (guided decoding),
flowmatch, oracles (closed-form and brute-force references) and harness.
"""
from .distributions import GaussianMixture, gaussian, standard_normal, symmetric_pair
from .schedule import NoiseSchedule, build_schedule

__version__ = "0.1.0"
__all__ = ["GaussianMixture", "gaussian", "standard_normal", "symmetric_pair", "NoiseSchedule", "build_schedule"]
