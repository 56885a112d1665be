"""Architecture builders, the quantized model container and checkpoint I/O."""
from __future__ import annotations

import copy
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor
from .init import init_weights
from .quant import BitAddress, QuantizedTensor, dequantize, flip_bit_inplace, quantize_layer

ARCH_MLP = "mlp-784-512-256-128-10"
ARCH_CCNN = "ccnn-32f3"
MLP_HIDDEN = (512, 256, 128)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | dropout | flatten
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    rate: float = 0.0
    name: str = ""

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.fan_in, self.fan_out)
        if self.kind == "conv2d":
            return (self.fan_out, self.fan_in, self.kernel, self.kernel)
        return ()


@dataclass
class Param:
    name: str
    weight: np.ndarray  # shadow full-precision weights
    bias: np.ndarray
    q: QuantizedTensor = None
    effective: np.ndarray = None  # dequant(q), what forward uses

    def requantize(self) -> None:
        self.q = quantize_layer(self.weight)
        self.effective = dequantize(self.q)


class Model:
    """Ordered layers with shadow weights and their int8 views.

    Weighted layers are addressed by their position among weighted layers
    (0 = first dense/conv layer); that id is what bit addresses use.
    """

    def __init__(self, arch: str, specs: list[LayerSpec], input_shape: tuple,
                 params: dict[int, Param], provenance: Optional[dict] = None):
        self.arch = arch
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.params = params
        self.provenance = dict(provenance or {})
        self.weighted = [i for i, s in enumerate(self.specs) if s.kind in tensor.WEIGHTED]
        for p in self.params.values():
            if p.q is None:
                p.requantize()

    # -- structure -------------------------------------------------------
    @property
    def num_layers(self) -> int:
        return len(self.weighted)

    @property
    def layer_names(self) -> list[str]:
        return [self.params[i].name for i in self.weighted]

    def layer(self, layer_id: int) -> Param:
        if not 0 <= layer_id < len(self.weighted):
            raise IndexError(f"no weighted layer {layer_id}")
        return self.params[self.weighted[layer_id]]

    def num_parameters(self) -> int:
        return sum(p.weight.size + p.bias.size for p in self.params.values())

    def clone(self) -> "Model":
        params = {i: Param(p.name, p.weight.copy(), p.bias.copy(), p.q.copy(), p.effective.copy())
                  for i, p in self.params.items()}
        return Model(self.arch, self.specs, self.input_shape, params, copy.deepcopy(self.provenance))

    # -- quantized state -------------------------------------------------
    def requantize(self) -> None:
        for p in self.params.values():
            p.requantize()

    def flip(self, addr: BitAddress) -> int:
        """Toggle one stored bit of a weighted layer in place; returns the new code."""
        p = self.layer(addr.layer)
        new = flip_bit_inplace(p.q, addr.index, addr.bit)
        p.effective.reshape(-1)[addr.index] = np.float64(new) * p.q.scale
        return new

    def code_bytes(self) -> bytes:
        return b"".join(self.params[i].q.codes.tobytes() for i in self.weighted)

    def effective_params(self) -> list:
        return [(self.params[i].effective, self.params[i].bias) if i in self.params else None
                for i in range(len(self.specs))]

    # -- evaluation ------------------------------------------------------
    def check_input(self, x: np.ndarray) -> None:
        if x.ndim < 2 or tuple(x.shape[1:]) != self.input_shape:
            raise tensor.ShapeError(f"{self.arch} expects inputs of shape (N, {self.input_shape}), got {x.shape}")

    def forward(self, x, *, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        return tensor.forward(self.specs, self.effective_params(), x, train=train, rng=rng)

    def gradients(self, x, y, *, train=False, rng=None) -> tensor.BackwardState:
        _, state = self.forward(x, train=train, rng=rng)
        return tensor.backward(state, y, self.specs)

    def logits(self, x, chunk: int = 2000) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        params = self.effective_params()
        out = [tensor.forward(self.specs, params, x[s:s + chunk], keep=False)[0]
               for s in range(0, len(x), chunk)]
        return np.concatenate(out, axis=0)

    def loss(self, x, y) -> float:
        return tensor.cross_entropy(self.logits(x), y)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.logits(x).argmax(axis=1) == np.asarray(y)))


# -- builders ----------------------------------------------------------------

def _assemble(arch, specs, input_shape, init, seed, provenance=None) -> Model:
    params = {}
    for n, i in enumerate(i for i, s in enumerate(specs) if s.kind in tensor.WEIGHTED):
        s = specs[i]
        w = init_weights(s.weight_shape, init, seed, layer=n)
        params[i] = Param(s.name, w, np.zeros(s.fan_out))
    prov = {"init": init, "init_seed": seed}
    prov.update(provenance or {})
    return Model(arch, specs, input_shape, params, prov)


def _dense_stack(sizes, dropout, names_from=1):
    specs = []
    for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(LayerSpec("dense", a, b, name=f"dense{n + names_from}"))
        if n < len(sizes) - 2:
            specs.append(LayerSpec("relu"))
            if dropout > 0:
                specs.append(LayerSpec("dropout", rate=dropout))
    return specs


def build_mlp(sizes=(784, *MLP_HIDDEN, 10), *, init="normal", seed=0, dropout=0.0,
              input_shape=None) -> Model:
    """Dense stack with ReLU between layers and raw logits out.

    The default is the 784-512-256-128-10 network; inputs of any shape whose
    size equals ``sizes[0]`` are flattened first.
    """
    sizes = tuple(int(s) for s in sizes)
    if input_shape is None:
        input_shape = (1, 28, 28) if sizes[0] == 784 else (sizes[0],)
    if int(np.prod(input_shape)) != sizes[0]:
        raise ValueError(f"input shape {input_shape} does not have {sizes[0]} features")
    arch = "mlp-" + "-".join(map(str, sizes))
    specs = [LayerSpec("flatten")] + _dense_stack(sizes, dropout)
    return _assemble(arch, specs, input_shape, init, seed)


def build_ccnn(filters=32, kernel=3, *, input_hw=28, channels=1, hidden=MLP_HIDDEN, classes=10,
               init="normal", seed=0, dropout=0.0) -> Model:
    """One valid 3x3 conv + ReLU in front of the MLP stack (no pooling, no padding)."""
    out_hw = input_hw - kernel + 1
    flat = filters * out_hw * out_hw
    specs = [LayerSpec("conv2d", channels, filters, kernel=kernel, name="conv1"), LayerSpec("relu"),
             LayerSpec("flatten")] + _dense_stack((flat, *hidden, classes), dropout)
    if (filters, kernel, input_hw, channels, tuple(hidden), classes) == (32, 3, 28, 1, MLP_HIDDEN, 10):
        arch = ARCH_CCNN
    else:
        arch = f"ccnn-{filters}f{kernel}-{channels}x{input_hw}-" + "-".join(map(str, (*hidden, classes)))
    return _assemble(arch, specs, (channels, input_hw, input_hw), init, seed,
                     {"conv_padding": "valid", "conv_stride": 1, "pooling": "none"})


_CCNN_RE = re.compile(r"^ccnn-(\d+)f(\d+)(?:-(\d+)x(\d+)((?:-\d+)+))?$")


def parse_arch(arch: str) -> tuple[str, dict]:
    """Validate an architecture id; returns the builder name and its keyword arguments."""
    if arch.startswith("mlp-"):
        try:
            sizes = tuple(int(t) for t in arch[4:].split("-"))
        except ValueError:
            raise ValueError(f"bad architecture id {arch!r}") from None
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad architecture id {arch!r}")
        return "mlp", {"sizes": sizes}
    m = _CCNN_RE.match(arch)
    if m:
        kw = {"filters": int(m.group(1)), "kernel": int(m.group(2))}
        if m.group(3) is not None:
            rest = [int(t) for t in m.group(5).strip("-").split("-")]
            kw.update(channels=int(m.group(3)), input_hw=int(m.group(4)), hidden=tuple(rest[:-1]), classes=rest[-1])
        if kw.get("input_hw", 28) < kw["kernel"]:
            raise ValueError(f"bad architecture id {arch!r}: kernel larger than input")
        return "ccnn", kw
    raise ValueError(f"unknown architecture id {arch!r}")


def build(arch: str, *, init="normal", seed=0, dropout=0.0) -> Model:
    """Build from an architecture id such as ``mlp-784-512-256-128-10`` or ``ccnn-32f3``."""
    kind, kw = parse_arch(arch)
    builder = build_mlp if kind == "mlp" else build_ccnn
    return builder(**kw, init=init, seed=seed, dropout=dropout)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"BFACKPT\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length


class CheckpointError(Exception):
    """Checkpoint cannot be read."""


class IntegrityError(CheckpointError):
    """Checkpoint bytes do not match their recorded checksum or are truncated."""


class FormatVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


def checksum64(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _payload_and_table(model: Model):
    chunks, table, offset = [], [], 0
    for lid, i in enumerate(model.weighted):
        p = model.params[i]
        parts = [p.weight.astype("<f8").tobytes(), p.bias.astype("<f8").tobytes(), p.q.codes.astype("<i1").tobytes()]
        table.append({
            "layer": lid, "spec_index": i, "name": p.name,
            "weight_shape": list(p.weight.shape), "bias_shape": list(p.bias.shape),
            "scale": float(p.q.scale).hex(), "offset": offset,
            "lengths": [len(b) for b in parts],
        })
        offset += sum(len(b) for b in parts)
        chunks.extend(parts)
    return b"".join(chunks), table


def checkpoint_bytes(model: Model) -> bytes:
    for p in model.params.values():
        if not (np.all(np.isfinite(p.weight)) and np.all(np.isfinite(p.bias))):
            raise ValueError("refusing to save a model with non-finite parameters")
    payload, table = _payload_and_table(model)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "specs": [s.__dict__ for s in model.specs],
        "layers": table,
        "provenance": model.provenance,
        "payload_bytes": len(payload),
        "payload_checksum": checksum64(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    hsum = checksum64(hbytes).encode()
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + hsum + payload


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(data: bytes) -> Model:
    if len(data) < _PREAMBLE.size:
        raise IntegrityError("checkpoint truncated before header")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a bfalab checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    pos = _PREAMBLE.size
    if len(data) < pos + hlen + 16:
        raise IntegrityError("checkpoint truncated inside header")
    hbytes = data[pos:pos + hlen]
    hsum = data[pos + hlen:pos + hlen + 16].decode("ascii", "replace")
    if checksum64(hbytes) != hsum:
        raise IntegrityError("header checksum mismatch")
    header = json.loads(hbytes)
    payload = data[pos + hlen + 16:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if checksum64(payload) != header["payload_checksum"]:
        raise IntegrityError("payload checksum mismatch")
    specs = [LayerSpec(**s) for s in header["specs"]]
    params = {}
    for entry in header["layers"]:
        off = entry["offset"]
        lw, lb, lq = entry["lengths"]
        w = np.frombuffer(payload, "<f8", count=lw // 8, offset=off).reshape(entry["weight_shape"]).astype(np.float64)
        b = np.frombuffer(payload, "<f8", count=lb // 8, offset=off + lw).reshape(entry["bias_shape"]).astype(np.float64)
        codes = np.frombuffer(payload, "<i1", count=lq, offset=off + lw + lb).reshape(entry["weight_shape"]).astype(np.int8)
        q = QuantizedTensor(codes, float.fromhex(entry["scale"]))
        params[entry["spec_index"]] = Param(entry["name"], w, b, q, dequantize(q))
    return Model(header["arch"], specs, tuple(header["input_shape"]), params, header["provenance"])


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())
