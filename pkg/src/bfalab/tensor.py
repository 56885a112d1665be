"""Forward and reverse-mode passes for the fixed layer set.

Layers are described by objects exposing ``kind`` (one of ``dense``, ``conv2d``,
``relu``, ``dropout``, ``flatten``) and ``rate`` (dropout only). Parameters are
passed separately as a list aligned with the layers: ``(weight, bias)`` for
weighted layers and ``None`` otherwise. Dense weights are laid out
``(fan_in, fan_out)`` so that ``weight[i, j]`` connects input unit ``i`` to
output unit ``j``; conv weights are ``(filters, channels, kh, kw)``.

All arrays are float64. Convolution is valid-padded with stride 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WEIGHTED = ("dense", "conv2d")


class ShapeError(ValueError):
    """Input does not match what the layer stack expects."""


class ProtocolError(RuntimeError):
    """Backward requested without a matching forward pass."""


@dataclass
class BackwardState:
    """Everything cached by :func:`forward` plus what :func:`backward` fills in.

    ``inputs[i]`` is the input to layer ``i`` (the ``a`` of the previous layer)
    and ``outputs[i]`` its output (``o`` for weighted layers). ``deltas`` holds
    dL/do for each weighted layer (the upstream signal rho).
    """

    start: int = 0
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    weight_grads: dict = field(default_factory=dict)
    bias_grads: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    forwarded: bool = False
    done: bool = False


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    f, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    # windows: (n, c, ho, wo, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", win, w, optimize=True)
    out += b.reshape(1, f, 1, 1)
    return out


def conv2d_backward(x, w, grad_out, need_input_grad=True):
    f, c, kh, kw = w.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    gw = np.einsum("nchwij,nfhw->fcij", win, grad_out, optimize=True)
    gb = grad_out.sum(axis=(0, 2, 3))
    gx = None
    if need_input_grad:
        ho, wo = grad_out.shape[2], grad_out.shape[3]
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.einsum(
                    "nfhw,fc->nchw", grad_out, w[:, :, i, j], optimize=True)
    return gx, gw, gb


def _check_input(layers, params, x):
    first = next((i for i, l in enumerate(layers) if l.kind in WEIGHTED), None)
    if first is None:
        return
    w = params[first][0]
    if layers[first].kind == "conv2d":
        if x.ndim != 4 or x.shape[1] != w.shape[1] or x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
            raise ShapeError(f"conv input must be (N, {w.shape[1]}, >={w.shape[2]}, >={w.shape[3]}), got {x.shape}")
    else:
        feat = int(np.prod(x.shape[1:])) if any(l.kind == "flatten" for l in layers[:first]) else (
            x.shape[1] if x.ndim == 2 else -1)
        if feat != w.shape[0]:
            raise ShapeError(f"dense input must have {w.shape[0]} features, got shape {x.shape}")


def forward(layers: Sequence, params: Sequence, x: np.ndarray, *, train: bool = False,
            rng: Optional[np.random.Generator] = None, start: int = 0,
            keep: bool = True) -> tuple[np.ndarray, BackwardState]:
    """Run layers ``start..end`` on ``x`` (the input to layer ``start``).

    With ``keep=False`` intermediate arrays are not retained; the returned state
    then cannot be used for :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] < 1:
        raise ShapeError(f"expected a batch with a leading sample axis, got shape {x.shape}")
    if start == 0:
        _check_input(layers, params, x)
    state = BackwardState(start=start, params=list(params))
    a = x
    for i in range(start, len(layers)):
        layer = layers[i]
        if keep:
            state.inputs.append(a)
        kind = layer.kind
        if kind == "dense":
            w, b = params[i]
            if a.ndim != 2 or a.shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: expected (N, {w.shape[0]}), got {a.shape}")
            out = a @ w + b
        elif kind == "conv2d":
            w, b = params[i]
            out = conv2d_forward(a, w, b)
        elif kind == "relu":
            out = np.maximum(a, 0.0)
        elif kind == "flatten":
            out = a.reshape(a.shape[0], -1)
        elif kind == "dropout":
            rate = layer.rate
            if train and rate > 0.0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
                if keep:
                    state.masks[i] = mask
                out = a * mask
            else:
                out = a
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if keep:
            state.outputs.append(out)
        a = out
    state.logits = a
    state.forwarded = keep
    return a, state


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("label out of range")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class under softmax."""
    labels = _check_labels(logits, labels)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(logits, labels)
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def backward(state: Optional[BackwardState], labels: np.ndarray, layers: Sequence) -> BackwardState:
    """Fill ``state`` with dL/dW, dL/db and rho for every weighted layer.

    rho for a weighted layer is dL/do; for an inner dense neuron j it equals
    (sum_k w_jk rho_k) * relu'(o_j), and dL/dw_ij = a_i rho_j.
    """
    if state is None or not state.forwarded:
        raise ProtocolError("backward called before forward")
    g = cross_entropy_grad(state.logits, labels)
    start = state.start
    first_weighted = next((i for i in range(start, len(layers)) if layers[i].kind in WEIGHTED), len(layers))
    for i in range(len(layers) - 1, start - 1, -1):
        if i < first_weighted:
            break
        k = i - start
        layer = layers[i]
        a = state.inputs[k]
        kind = layer.kind
        if kind == "dense":
            w, _ = state.params[i]
            state.deltas[i] = g
            state.weight_grads[i] = a.T @ g
            state.bias_grads[i] = g.sum(axis=0)
            g = g @ w.T if i > first_weighted else None
        elif kind == "conv2d":
            w, _ = state.params[i]
            state.deltas[i] = g
            gx, gw, gb = conv2d_backward(a, w, g, need_input_grad=i > first_weighted)
            state.weight_grads[i] = gw
            state.bias_grads[i] = gb
            g = gx
        elif kind == "relu":
            g = g * (a > 0)
        elif kind == "flatten":
            g = g.reshape(a.shape)
        elif kind == "dropout":
            if i in state.masks:
                g = g * state.masks[i]
    state.done = True
    return state
