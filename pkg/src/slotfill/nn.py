"""Small parameter helpers shared by the encoder and the heads."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Weight ~ N(0, 1/fan_in), zero bias."""
    W = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)),
               requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return W, b


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, W), b)


def init_layer_norm(d: int):
    gamma = Tensor(np.ones(d), requires_grad=True)
    beta = Tensor(np.zeros(d), requires_grad=True)
    return gamma, beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(centered, ad.tsqrt(ad.add(var, eps))), gamma), beta)
