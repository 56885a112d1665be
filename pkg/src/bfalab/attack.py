"""Bit-Flip Attack with Progressive Bit Search (PBS).

Each iteration computes dL/dW on the attack set with the current int8
weights, picks the best bit of every attackable layer (in-layer search),
tentatively flips each pick to measure the attack-set loss (cross-layer
search), and permanently applies the pick with the highest loss. Restricting
the attackable layers gives the spatially-targeted variant (ST-BFA).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor
from .data import Batch, Dataset, sample_attack_set
from .init import philox
from .models import Model
from .quant import NBITS, PLACE_VALUES, BitAddress
from .train import ConfigError

HEURISTICS = ("gradient", "taylor")
DEFAULT_GOALS = (0.11, 0.25, 0.50, 0.75)
EVAL_SUBSAMPLE_KEY = 0xE7A1  # eval subsample is fixed across attack seeds

GOAL_REACHED = "goal-reached"
BUDGET_EXHAUSTED = "budget-exhausted"
STALLED = "stalled"


class AttackStalled(RuntimeError):
    """No attackable layer offers a bit whose flip follows the loss gradient."""


@dataclass(frozen=True)
class AttackConfig:
    attack_size: int = 256
    goals: tuple = DEFAULT_GOALS
    budget: int = 100
    mask: Optional[tuple] = None  # None: every weighted layer (standard BFA)
    heuristic: str = "gradient"
    candidates: int = 1
    eval_subsample: int = 0  # 0: full test set
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "goals", tuple(sorted(float(g) for g in self.goals)))
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(sorted({int(m) for m in self.mask})))
            if not self.mask:
                raise ConfigError("layer mask must not be empty", "mask")
        if not self.goals or not all(0 < g < 1 for g in self.goals):
            raise ConfigError("goals must be fractions strictly between 0 and 1", "goals")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1", "budget")
        if self.attack_size < 1:
            raise ConfigError("attack_size must be >= 1", "attack_size")
        if self.heuristic not in HEURISTICS:
            raise ConfigError(f"unknown heuristic {self.heuristic!r}; expected one of {HEURISTICS}", "heuristic")
        if self.candidates < 1:
            raise ConfigError("candidates must be >= 1", "candidates")
        if self.eval_subsample < 0:
            raise ConfigError("eval_subsample must be >= 0", "eval_subsample")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["goals"] = list(self.goals)
        d["mask"] = None if self.mask is None else list(self.mask)
        return d


@dataclass(frozen=True)
class FlipCandidate:
    address: BitAddress
    bit_before: int
    grad: float  # dL/db along the 0->1 direction of the stored bit
    bit_after: int
    score: float
    loss_after: Optional[float] = None


@dataclass(frozen=True)
class FlipRecord:
    step: int
    address: BitAddress
    pre_loss: float
    post_loss: float
    pre_acc: float
    post_acc: float


@dataclass
class AttackTrace:
    records: list
    goals: tuple
    goal_steps: dict  # goal -> first step with acc <= goal, or None
    termination: str
    initial_loss: float
    initial_acc: float
    layer_names: list = field(default_factory=list)
    eval_size: int = 0
    arch: str = ""
    config: dict = field(default_factory=dict)

    def accuracies(self) -> list:
        return [self.initial_acc] + [r.post_acc for r in self.records]

    def losses(self) -> list:
        return [self.initial_loss] + [r.post_loss for r in self.records]


def flip_rule(b: int, grad: float) -> int:
    """m = b xor (sign(g)/2 + 1/2); b_hat = b xor m."""
    s = int(np.sign(grad) / 2 + 0.5)
    m = int(b) ^ s
    return int(b) ^ m


# -- in-layer search -----------------------------------------------------------

def _bit_table(codes: np.ndarray, wgrad: np.ndarray, scale: float):
    """Per-bit (grad, current bit, usable) arrays of shape (8, n)."""
    c = codes.reshape(-1).astype(np.int64)
    g = wgrad.reshape(-1)
    gb = (PLACE_VALUES.astype(np.float64) * scale)[:, None] * g[None, :]
    bits = (c[None, :] >> np.arange(NBITS)[:, None]) & 1
    target = (gb > 0).astype(np.int64)
    usable = (gb != 0) & (target != bits)
    return gb, bits, usable


def _rank_layer(layer_id: int, codes: np.ndarray, wgrad: np.ndarray, scale: float, effective: np.ndarray,
                heuristic: str, n_b: int) -> list[FlipCandidate]:
    n = codes.size
    if n == 0:
        raise ValueError(f"layer {layer_id} has no weights")
    if heuristic == "gradient":
        picks = []
        gflat = wgrad.reshape(-1)
        cflat = codes.reshape(-1).astype(np.int64)
        for k in range(NBITS):
            gb = gflat * (float(PLACE_VALUES[k]) * scale)
            bit = (cflat >> k) & 1
            score = np.where((gb != 0) & ((gb > 0) != (bit == 1)), np.abs(gb), -1.0)
            if n > n_b:
                kth = max(np.partition(score, n - n_b)[n - n_b], 0.0)
                idx = np.flatnonzero(score >= kth)
            else:
                idx = np.flatnonzero(score >= 0)
            picks.extend((-score[i], int(i), k, float(gb[i]), int(bit[i])) for i in idx)
        picks.sort()
        return [FlipCandidate(BitAddress(layer_id, i, k), b, g, flip_rule(b, g), -s)
                for s, i, k, g, b in picks[:n_b]]
    if heuristic == "taylor":
        gb, bits, usable = _bit_table(codes, wgrad, scale)
        has_bit = usable.any(axis=0)
        score = np.where(has_bit, np.abs(effective.reshape(-1) * wgrad.reshape(-1)), -1.0)
        order = np.lexsort((np.arange(n), -score))[:n_b]
        out = []
        for i in order:
            if score[i] < 0:
                break
            k = int(np.flatnonzero(usable[:, i]).max())  # largest |dw/dflip| among usable bits
            g, b = float(gb[k, i]), int(bits[k, i])
            out.append(FlipCandidate(BitAddress(layer_id, int(i), k), b, g, flip_rule(b, g), float(score[i])))
        return out
    raise ValueError(f"unknown heuristic {heuristic!r}")


def rank_layer_from_grads(model: Model, layer_id: int, state: tensor.BackwardState, heuristic="gradient",
                          n_b=1) -> list[FlipCandidate]:
    p = model.layer(layer_id)
    spec_idx = model.weighted[layer_id]
    return _rank_layer(layer_id, p.q.codes, state.weight_grads[spec_idx], p.q.scale, p.effective, heuristic, n_b)


def rank_bits_in_layer(model: Model, layer_id: int, x: np.ndarray, y: np.ndarray, heuristic: str = "gradient",
                       n_b: int = 1) -> list[FlipCandidate]:
    """Top ``n_b`` flippable bits of one layer, best first.

    gradient: by |dL/db|; taylor: weights by |w dL/dw|, each with its most
    significant usable bit. Bits whose flip would not move along the loss
    gradient (zero gradient, or already at the target value) are skipped.
    """
    state = model.gradients(x, y)
    return rank_layer_from_grads(model, layer_id, state, heuristic, n_b)


# -- cross-layer search ----------------------------------------------------------

def _loss_from(model: Model, state: tensor.BackwardState, spec_idx: int, y: np.ndarray) -> float:
    logits, _ = tensor.forward(model.specs, model.effective_params(), state.inputs[spec_idx],
                               start=spec_idx, keep=False)
    return tensor.cross_entropy(logits, y)


def pbs_step(model: Model, x: np.ndarray, y: np.ndarray, mask=None, heuristic: str = "gradient",
             n_b: int = 1, state: Optional[tensor.BackwardState] = None) -> FlipCandidate:
    """Pick the flip that maximizes attack-set loss; the model is left unchanged.

    Ties go to the lowest (layer, weight index, bit).
    """
    if state is None:
        state = model.gradients(x, y)
    layers = range(model.num_layers) if mask is None else sorted(mask)
    best = None
    for lid in layers:
        spec_idx = model.weighted[lid]
        for cand in rank_layer_from_grads(model, lid, state, heuristic, n_b):
            model.flip(cand.address)
            try:
                loss = _loss_from(model, state, spec_idx, y)
            finally:
                model.flip(cand.address)
            key = (-loss, cand.address)
            if best is None or key < best[0]:
                best = (key, FlipCandidate(cand.address, cand.bit_before, cand.grad, cand.bit_after, cand.score, loss))
    if best is None:
        raise AttackStalled("no layer in the mask offers a usable bit")
    return best[1]


# -- test-set evaluation with per-layer input caching ------------------------------

class LayerCachedEvaluator:
    """Accuracy/loss on a fixed set, re-running only the layers a flip can affect.

    Inputs to weighted layers are cached while they fit in ``max_cache_bytes``;
    after a flip in layer l the forward pass restarts from the deepest cached
    input at or before l.
    """

    def __init__(self, model: Model, x: np.ndarray, y: np.ndarray, *, chunk: int = 1000,
                 max_cache_bytes: int = 512 * 2 ** 20):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        self.chunk = chunk
        model.check_input(self.x)
        n = len(self.y)
        # bytes per sample of each weighted layer's input, from one probe forward
        _, probe = tensor.forward(model.specs, model.effective_params(), self.x[:1])
        budget = max_cache_bytes
        self.cached = {}
        for spec_idx in model.weighted:
            if spec_idx == 0:
                continue
            nbytes = probe.inputs[spec_idx].nbytes * n
            if nbytes <= budget:
                self.cached[spec_idx] = None
                budget -= nbytes
        self.logits = None
        self.refresh(model, 0)

    def refresh(self, model: Model, spec_idx: int) -> None:
        start = max([i for i in self.cached if i <= spec_idx], default=0)
        params = model.effective_params()
        store = {i: [] for i in self.cached if i > start}
        outs = []
        for s in range(0, len(self.y), self.chunk):
            a = self.x[s:s + self.chunk] if start == 0 else self.cached[start][s:s + self.chunk]
            logits, st = tensor.forward(model.specs, params, a, start=start, keep=bool(store))
            for i in store:
                store[i].append(st.inputs[i - start])
            outs.append(logits)
        for i, parts in store.items():
            self.cached[i] = np.concatenate(parts, axis=0)
        self.logits = np.concatenate(outs, axis=0)

    def accuracy(self) -> float:
        return float(np.mean(self.logits.argmax(axis=1) == self.y))

    def loss(self) -> float:
        return tensor.cross_entropy(self.logits, self.y)


def eval_indices(n_test: int, subsample: int) -> np.ndarray:
    if subsample <= 0 or subsample >= n_test:
        return np.arange(n_test)
    return np.sort(philox(EVAL_SUBSAMPLE_KEY, subsample).permutation(n_test)[:subsample])


def run_attack(model: Model, dataset: Dataset, config: AttackConfig, *,
               progress: Optional[Callable[[FlipRecord], None]] = None,
               attack_set: Optional[Batch] = None) -> AttackTrace:
    """Repeat PBS + permanent flip until the lowest goal or the budget is reached.

    Works on a private clone; ``model`` is not modified.
    """
    model = model.clone()
    if config.mask is not None and max(config.mask) >= model.num_layers:
        raise ConfigError(f"mask {config.mask} names a layer >= {model.num_layers}", "mask")
    batch = attack_set or sample_attack_set(dataset.train_x, dataset.train_y, config.attack_size, config.seed)
    idx = eval_indices(len(dataset.test_y), config.eval_subsample)
    evaluator = LayerCachedEvaluator(model, dataset.test_x[idx], dataset.test_y[idx])
    acc = evaluator.accuracy()
    state = model.gradients(batch.x, batch.y)
    loss = tensor.cross_entropy(state.logits, batch.y)
    initial_acc, initial_loss = acc, loss
    goal_steps = {g: (0 if acc <= g else None) for g in config.goals}
    records = []
    termination = BUDGET_EXHAUSTED
    lowest = min(config.goals)
    for step in range(1, config.budget + 1):
        if goal_steps[lowest] is not None:
            termination = GOAL_REACHED
            break
        try:
            cand = pbs_step(model, batch.x, batch.y, config.mask, config.heuristic, config.candidates, state)
        except AttackStalled:
            termination = STALLED
            break
        model.flip(cand.address)
        evaluator.refresh(model, model.weighted[cand.address.layer])
        new_acc = evaluator.accuracy()
        state = model.gradients(batch.x, batch.y)
        new_loss = tensor.cross_entropy(state.logits, batch.y)
        rec = FlipRecord(step, cand.address, loss, new_loss, acc, new_acc)
        records.append(rec)
        if progress:
            progress(rec)
        acc, loss = new_acc, new_loss
        for g in config.goals:
            if goal_steps[g] is None and acc <= g:
                goal_steps[g] = step
    else:
        if goal_steps[lowest] is not None:
            termination = GOAL_REACHED
    return AttackTrace(records, config.goals, goal_steps, termination, initial_loss, initial_acc,
                       model.layer_names, len(idx), model.arch, config.as_dict())


def replay(model: Model, trace: AttackTrace, steps: Optional[int] = None) -> Model:
    """Clone of ``model`` with the first ``steps`` permanent flips of ``trace`` applied."""
    out = model.clone()
    for rec in trace.records[:steps]:
        out.flip(rec.address)
    return out


# -- trace report ---------------------------------------------------------------

TRACE_HEADER = "# bfalab attack trace v1"
COLUMNS = ("step", "layer", "weight_index", "bit", "pre_loss", "post_loss", "pre_acc", "post_acc")


def format_trace(trace: AttackTrace) -> str:
    meta = {
        "arch": trace.arch, "layers": trace.layer_names, "eval_size": trace.eval_size,
        "initial_loss": trace.initial_loss, "initial_acc": trace.initial_acc, "config": trace.config,
    }
    lines = [TRACE_HEADER]
    lines += [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in meta.items()]
    lines.append("\t".join(COLUMNS))
    for r in trace.records:
        a = r.address
        lines.append("\t".join([str(r.step), str(a.layer), str(a.index), str(a.bit),
                                repr(r.pre_loss), repr(r.post_loss), repr(r.pre_acc), repr(r.post_acc)]))
    lines.append("[summary]")
    lines.append(f"termination: {trace.termination}")
    lines.append(f"flips: {len(trace.records)}")
    for g in trace.goals:
        s = trace.goal_steps[g]
        lines.append(f"goal {g!r}: {'not reached' if s is None else s}")
    return "\n".join(lines) + "\n"


def write_trace(trace: AttackTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_trace(trace))
    return path


def parse_trace(text: str) -> AttackTrace:
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ValueError("not a bfalab attack trace")
    meta, records, summary = {}, [], {}
    section = "meta"
    for line in lines[1:]:
        if not line.strip():
            continue
        if section == "meta" and line.startswith("# "):
            k, v = line[2:].split(": ", 1)
            meta[k] = json.loads(v)
        elif line == "\t".join(COLUMNS):
            section = "records"
        elif line == "[summary]":
            section = "summary"
        elif section == "records":
            f = line.split("\t")
            records.append(FlipRecord(int(f[0]), BitAddress(int(f[1]), int(f[2]), int(f[3])),
                                      float(f[4]), float(f[5]), float(f[6]), float(f[7])))
        elif section == "summary":
            k, v = line.split(": ", 1)
            summary[k] = v
        else:
            raise ValueError(f"unexpected trace line {line!r}")
    goals, goal_steps = [], {}
    for k, v in summary.items():
        if k.startswith("goal "):
            g = float(k[5:])
            goals.append(g)
            goal_steps[g] = None if v == "not reached" else int(v)
    if int(summary.get("flips", len(records))) != len(records):
        raise ValueError("trace summary flip count disagrees with records")
    return AttackTrace(records, tuple(goals), goal_steps, summary["termination"], meta["initial_loss"],
                       meta["initial_acc"], meta.get("layers", []), meta.get("eval_size", 0),
                       meta.get("arch", ""), meta.get("config", {}))


def read_trace(path) -> AttackTrace:
    return parse_trace(Path(path).read_text())


def goal_crossing_monotone(trace: AttackTrace) -> bool:
    """Steps-to-goal never increases with the goal fraction (unreached counts as infinity)."""
    steps = [math.inf if trace.goal_steps[g] is None else trace.goal_steps[g] for g in sorted(trace.goals)]
    return all(a >= b for a, b in zip(steps, steps[1:]))
