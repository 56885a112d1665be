"""Weight initialization schemes."""
from __future__ import annotations

import numpy as np

SCHEMES = ("normal", "uniform", "xavier-normal", "xavier-uniform")
NORMAL_STD = 0.05
UNIFORM_BOUND = 0.05

# stream ids mixed into seed sequences so init/shuffle/dropout draws never collide
STREAM_INIT = 0x1417
STREAM_SHUFFLE = 0x5AF1
STREAM_DROPOUT = 0xD509
STREAM_ATTACK = 0xA77C
STREAM_DATA = 0xDA7A


def philox(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def fans(shape: tuple) -> tuple[int, int]:
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    if len(shape) == 4:
        f, c, kh, kw = shape
        return int(c * kh * kw), int(f * kh * kw)
    raise ValueError(f"no fan definition for shape {shape}")


def init_weights(shape: tuple, scheme: str, seed: int, layer: int = 0) -> np.ndarray:
    """Draw a weight tensor. Biases are always zero and are not drawn here."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")
    rng = philox(STREAM_INIT, seed, layer)
    fan_in, fan_out = fans(tuple(shape))
    if scheme == "normal":
        return rng.normal(0.0, NORMAL_STD, size=shape)
    if scheme == "uniform":
        return rng.uniform(-UNIFORM_BOUND, UNIFORM_BOUND, size=shape)
    if scheme == "xavier-normal":
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
