"""Counterfactual text-based image editing with low-rank adapters.

Pipeline: fit a generator-side adapter U that reconstructs a source image,
fit a text-encoder-side adapter Delta that encodes the post-edit -> pre-edit
transition, then invert Delta and DDIM-sample to produce the edited image.
Ships a self-contained toy diffusion backend for desk-scale runs.
"""

from cfedit.schedule import NoiseSchedule, forward_noise, ddim_step, ddim_sample
from cfedit.lora import LoraAdapter, LoraFactorPair, gamma_schedule

__all__ = [
    "NoiseSchedule",
    "forward_noise",
    "ddim_step",
    "ddim_sample",
    "LoraAdapter",
    "LoraFactorPair",
    "gamma_schedule",
]
