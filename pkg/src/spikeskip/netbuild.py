"""Trainable spiking networks over a shared supernet weight store.

Every layer's weight tensor is allocated for the widest input it can ever see
(all skip slots dense-style, full source channels).  Column layout of layer
``v`` is ``[sequential | source 0 | source 1 | ... | source v-2]``.  An
assignment activates the sequential columns plus, for each dense skip, the
selected channels of that source; additive skips need no extra columns.
Any two assignments therefore read and write the same coordinates for the
weights they share.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .engine import LifParams, SurrogateSpec, lif_step, merge_asc, merge_dsc, pooled_rate
from .harness.data import Dataset
from .topology import (
    ASC,
    DSC,
    Assignment,
    BlockAdjacency,
    NetworkPlan,
    count_macs,
    layer_input_channels,
    n_selected,
    resolve_assignment,
    serialize_assignment,
    validate,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSKC"
CHECKPOINT_VERSION = 1


class BuildError(ValueError):
    pass


class MissingForwardCache(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class StoreMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"  # sgd | adam
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    timesteps: int = 25
    batch_size: int = 32
    seed: int = 0
    loss: str = "spike_count_ce"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss != "spike_count_ce":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    block_rates: tuple[float, ...]
    firing_rate: float
    macs: int
    seconds: float = field(default=0.0, compare=False)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


# --- weight store -----------------------------------------------------------


def _layer_layout(plan: NetworkPlan, b: int, v: int) -> tuple[int, dict[int, int]]:
    """Width of layer ``v``'s supernet input and the column offset of each dense source."""
    shapes = plan.vertex_shapes()[b]
    seq = shapes[v - 1]
    width = seq[0]
    offsets = {}
    for u in range(0, v - 1):
        src = shapes[u]
        if len(src) == len(seq) and src[1:] == seq[1:]:
            offsets[u] = width
            width += src[0]
    return width, offsets


class WeightStore:
    """Named supernet tensors in declaration order."""

    def __init__(self, plan: NetworkPlan, tensors: dict[str, Tensor], seed: int = 0):
        self.plan = plan
        self.tensors = tensors
        self.seed = seed

    @classmethod
    def init(cls, plan: NetworkPlan, seed: int = 0, dtype=torch.float32, gain: float = 2.5) -> "WeightStore":
        """Uniform init scaled by the sequential fan-in; hidden biases start at zero."""
        gen = torch.Generator().manual_seed(int(seed))
        shapes = plan.vertex_shapes()
        tensors: dict[str, Tensor] = {}
        for b, block in enumerate(plan.blocks):
            for v, layer in enumerate(block.layers, start=1):
                width, _ = _layer_layout(plan, b, v)
                seq = shapes[b][v - 1][0]
                if layer.kind == "conv":
                    wshape = (layer.out_channels, width, layer.kernel, layer.kernel)
                    fan_in = seq * layer.kernel**2
                else:
                    wshape = (layer.out_channels, width)
                    fan_in = seq
                bound = gain / math.sqrt(fan_in)
                w = (torch.rand(wshape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                tensors[f"block{b}.layer{v}.weight"] = w.to(dtype)
                tensors[f"block{b}.layer{v}.bias"] = torch.zeros(layer.out_channels, dtype=dtype)
        # The readout starts with zero weights and a rheobase bias: every output
        # neuron hovers just below threshold, where the surrogate gradient peaks,
        # so none of them begins training silent.
        head = plan.blocks[-1].layers[-1].neuron
        tensors["readout.weight"] = torch.zeros((plan.n_classes, plan.readout_features()), dtype=dtype)
        tensors["readout.bias"] = torch.full((plan.n_classes,), head.threshold * (1 - head.beta), dtype=dtype)
        return cls(plan, tensors, seed)

    def clone(self) -> "WeightStore":
        return WeightStore(self.plan, {k: t.clone() for k, t in self.tensors.items()}, self.seed)

    def names(self) -> list[str]:
        return list(self.tensors)

    def check_compatible(self, plan: NetworkPlan) -> None:
        if self.plan.digest() != plan.digest():
            raise StoreMismatch("weight store was allocated for a different plan")


# --- network ----------------------------------------------------------------


def dsc_selection(seed: int, b: int, u: int, v: int, channels: int, ratio: float) -> tuple[int, ...]:
    """Channels of source ``u`` concatenated into layer ``v``; fixed per run seed and edge."""
    rng = np.random.default_rng([int(seed), b, u, v])
    k = n_selected(channels, ratio)
    return tuple(sorted(int(c) for c in rng.choice(channels, size=k, replace=False)))


class TrainableNetwork:
    """Spiking network for one assignment, parameterized by slices of a supernet store."""

    def __init__(self, plan: NetworkPlan, assignment: Assignment, store: WeightStore, seed: int,
                 surrogate: SurrogateSpec = SurrogateSpec()):
        self.plan = plan
        self.assignment = assignment
        self.seed = seed
        self.surrogate = surrogate
        self.params = {k: t.clone().requires_grad_(True) for k, t in store.tensors.items()}
        shapes = plan.vertex_shapes()
        self.selections: dict[tuple[int, int, int], tuple[int, ...]] = {}
        self.columns: dict[tuple[int, int], Tensor] = {}
        for b, adj in enumerate(assignment):
            for v in range(1, adj.depth + 1):
                _, offsets = _layer_layout(plan, b, v)
                cols = list(range(shapes[b][v - 1][0]))
                for u, code in adj.sources(v):
                    if code != DSC:
                        continue
                    sel = dsc_selection(seed, b, u, v, shapes[b][u][0], plan.dsc_ratio)
                    self.selections[(b, u, v)] = sel
                    cols.extend(offsets[u] + c for c in sel)
                self.columns[(b, v)] = torch.tensor(cols, dtype=torch.long)
        # per layer: additive sources, dense sources with their channel index tensors
        self.routes: dict[tuple[int, int], tuple[list[int], list[tuple[int, Tensor]]]] = {}
        for b, adj in enumerate(assignment):
            for v in range(1, adj.depth + 1):
                srcs = adj.sources(v)
                self.routes[(b, v)] = (
                    [u for u, c in srcs if c == ASC],
                    [(u, torch.tensor(self.selections[(b, u, v)], dtype=torch.long)) for u, c in srcs if c == DSC],
                )

    @property
    def dtype(self):
        return self.params["readout.weight"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def active_weights(self) -> dict[str, Tensor]:
        """Per-layer weight slices actually used by this assignment."""
        out = {}
        for (b, v), cols in self.columns.items():
            w = self.params[f"block{b}.layer{v}.weight"]
            if len(cols) == w.shape[1] or bool((cols == torch.arange(len(cols))).all()):
                out[(b, v)] = w.narrow(1, 0, len(cols))
            else:
                out[(b, v)] = w.index_select(1, cols)
        return out

    def active_mask(self, name: str) -> Tensor:
        """Boolean mask of the coordinates of ``name`` this assignment can touch."""
        t = self.params[name]
        if not name.endswith(".weight") or name.startswith("readout"):
            return torch.ones_like(t, dtype=torch.bool)
        b, v = _parse_layer_name(name)
        mask = torch.zeros_like(t, dtype=torch.bool)
        mask[:, self.columns[(b, v)]] = True
        return mask

    def load_from(self, store: WeightStore) -> None:
        store.check_compatible(self.plan)
        with torch.no_grad():
            for k, t in store.tensors.items():
                self.params[k].copy_(t)

    def commit(self, store: WeightStore) -> None:
        """Write this network's active slices back into ``store``."""
        store.check_compatible(self.plan)
        with torch.no_grad():
            for k, p in self.params.items():
                mask = self.active_mask(k)
                store.tensors[k][mask] = p.detach()[mask].to(store.tensors[k].dtype)

    def state_store(self) -> WeightStore:
        return WeightStore(self.plan, {k: p.detach().clone() for k, p in self.params.items()}, self.seed)

    def macs(self) -> int:
        return count_macs(self.plan, self.assignment)


def _parse_layer_name(name: str) -> tuple[int, int]:
    blk, lay, _ = name.split(".")
    return int(blk[len("block"):]), int(lay[len("layer"):])


def build(plan: NetworkPlan, assignment: Sequence[BlockAdjacency], seed: int = 0,
          store: WeightStore | None = None, surrogate: SurrogateSpec = SurrogateSpec(),
          dtype=torch.float32) -> TrainableNetwork:
    """Instantiate ``plan`` under ``assignment``.

    Weights come from ``store`` when given, otherwise from a fresh supernet
    initialized with ``seed``.  ``seed`` also fixes the dense-skip channel
    selections.
    """
    try:
        assignment = resolve_assignment(plan, assignment)
    except ValueError as exc:
        raise BuildError(f"invalid assignment: {exc}") from exc
    for b, adj in enumerate(assignment):
        problems = validate(adj)
        if problems:
            raise BuildError(f"block {b} adjacency invalid: {problems}")
    layer_input_channels(plan, assignment)  # ShapeError on additive-skip mismatch
    if store is None:
        store = WeightStore.init(plan, seed, dtype=dtype)
    else:
        store.check_compatible(plan)
    return TrainableNetwork(plan, assignment, store, seed, surrogate)


# --- forward / backward -----------------------------------------------------


@dataclass
class ForwardResult:
    scores: Tensor  # (batch, classes) output spike counts over T
    output_spikes: Tensor  # (T, batch, classes)
    counts: dict[tuple[int, int], tuple[int, int]]  # (block, layer) -> (spikes, entries)
    records: dict[tuple[int, int], Tensor] | None
    T: int
    consumed: bool = False


def forward(net: TrainableNetwork, spikes: Tensor, T: int | None = None, smooth: bool = False,
            keep_records: bool = False) -> ForwardResult:
    """Unroll the network over ``T`` steps of a time-major input batch."""
    T = spikes.shape[0] if T is None else T
    if spikes.shape[0] < T:
        raise ValueError(f"input holds {spikes.shape[0]} steps, {T} requested")
    plan = net.plan
    in_shape = tuple(spikes.shape[2:])
    if in_shape != plan.input_shape:
        raise ValueError(f"input sample shape {in_shape} does not match plan input {plan.input_shape}")
    batch = spikes.shape[1]
    spikes = spikes.to(net.dtype)
    weights = net.active_weights()
    shapes = plan.vertex_shapes()
    membranes = {}
    for b, block in enumerate(plan.blocks):
        for v in range(1, block.depth + 1):
            membranes[(b, v)] = torch.zeros((batch,) + shapes[b][v], dtype=net.dtype)
    head_neuron = plan.blocks[-1].layers[-1].neuron
    membranes["readout"] = torch.zeros((batch, plan.n_classes), dtype=net.dtype)
    w_out, b_out = net.params["readout.weight"], net.params["readout.bias"]

    rec_steps: dict[tuple[int, int], list[Tensor]] = {k: [] for k in membranes if k != "readout"}
    out_steps = []
    for t in range(T):
        x = spikes[t]
        for b, block in enumerate(plan.blocks):
            if block.kind == "fc" and x.dim() > 2:
                x = x.flatten(1)
            outs = [x]
            for v, layer in enumerate(block.layers, start=1):
                asc, dsc = net.routes[(b, v)]
                z = outs[v - 1]
                if asc:
                    z = merge_asc([z] + [outs[u] for u in asc])
                if dsc:
                    z = merge_dsc(z, [outs[u] for u, _ in dsc], [sel for _, sel in dsc])
                w = weights[(b, v)]
                bias = net.params[f"block{b}.layer{v}.bias"]
                if layer.kind == "conv":
                    current = F.conv2d(z, w, bias, stride=layer.stride, padding=layer.padding)
                else:
                    current = F.linear(z, w, bias)
                mem, s = lif_step(membranes[(b, v)], current, layer.neuron, net.surrogate,
                                  smooth=smooth, check=False)
                membranes[(b, v)] = mem
                rec_steps[(b, v)].append(s)
                outs.append(s)
            x = outs[-1]
        current = F.linear(x.flatten(1), w_out, b_out)
        mem, s = lif_step(membranes["readout"], current, head_neuron, net.surrogate, smooth=smooth, check=False)
        membranes["readout"] = mem
        out_steps.append(s)

    output_spikes = torch.stack(out_steps)
    counts = {}
    records = {} if keep_records else None
    for key, steps in rec_steps.items():
        stacked = torch.stack(steps).detach()
        counts[key] = (int(stacked.sum().item()) if not smooth else float(stacked.sum().item()), stacked.numel())
        if keep_records:
            records[key] = stacked
    return ForwardResult(output_spikes.sum(0), output_spikes, counts, records, T)


def spike_count_loss(scores: Tensor, labels: Tensor, T: int) -> Tensor:
    """Cross-entropy over softmax of per-class spike counts divided by ``T``."""
    return F.cross_entropy(scores / T, labels)


def backward_bptt(net: TrainableNetwork, result: ForwardResult, labels: Tensor | None = None,
                  grad_scores: Tensor | None = None, scale: float = 1.0) -> dict[str, Tensor]:
    """Gradients of the loss through the unrolled graph, one per store tensor.

    Pass ``labels`` for the spike-count cross-entropy loss, or ``grad_scores``
    for an explicit upstream gradient on the class scores.  Inactive columns
    receive zero gradient.
    """
    if result.consumed or result.scores.grad_fn is None:
        raise MissingForwardCache("forward pass did not retain a graph (or it was already used)")
    if (labels is None) == (grad_scores is None):
        raise ValueError("pass exactly one of labels or grad_scores")
    if labels is not None:
        objective = spike_count_loss(result.scores, labels, result.T) * scale
    else:
        objective = (result.scores * grad_scores.to(result.scores.dtype)).sum() * scale
    names = list(net.params)
    grads = torch.autograd.grad(objective, [net.params[n] for n in names], allow_unused=True)
    result.consumed = True
    return {n: (g if g is not None else torch.zeros_like(net.params[n])) for n, g in zip(names, grads)}


# --- training ---------------------------------------------------------------


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.lr)


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([int(seed), epoch, batch]).generate_state(1)[0])


def train(net: TrainableNetwork, dataset: Dataset, config: TrainConfig) -> tuple[TrainableNetwork, list[EpochStats]]:
    """Minibatch training with a fixed, seed-derived shuffle order."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = net.parameters()
    opt = _make_optimizer(params, config)
    history = []
    n = len(dataset)
    for epoch in range(config.epochs):
        order = np.random.default_rng([int(config.seed), epoch]).permutation(n)
        total_loss, correct = 0.0, 0
        for i, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = dataset.spikes(idx, config.timesteps, _batch_seed(config.seed, epoch, i), dtype=net.dtype)
            y = dataset.labels[torch.as_tensor(idx)]
            result = forward(net, x, config.timesteps)
            loss = spike_count_loss(result.scores, y, config.timesteps)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {i} "
                    f"(assignment {serialize_assignment(net.assignment)}, lr {config.lr})"
                )
            opt.zero_grad(set_to_none=False)
            loss.backward()
            # Spike counts keep the loss bounded, so a blown-up state shows in the gradients.
            bad = [k for k, p in net.params.items() if not torch.isfinite(p.grad).all()]
            if bad:
                raise TrainingDiverged(
                    f"non-finite gradient for {bad[0]} at epoch {epoch} batch {i} "
                    f"(assignment {serialize_assignment(net.assignment)}, lr {config.lr})"
                )
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((result.scores.argmax(1) == y).sum())
        history.append(EpochStats(epoch, total_loss / n, correct / n))
        log.debug("epoch %d loss %.4f acc %.3f", epoch, total_loss / n, correct / n)
    return net, history


def fine_tune(net: TrainableNetwork, store: WeightStore, n: int, dataset: Dataset,
              config: TrainConfig) -> tuple[TrainableNetwork, list[EpochStats]]:
    """Start from the store's slices, train ``n`` epochs, commit the slices back."""
    net.load_from(store)
    if n == 0:
        return net, []
    net, history = train(net, dataset, replace(config, epochs=n))
    net.commit(store)
    return net, history


EVAL_SEED = 0x5EED


def evaluate(net: TrainableNetwork, dataset: Dataset, T: int, batch_size: int = 128) -> EvalReport:
    """Accuracy by argmax of output spike counts plus firing rates and MACs.

    Ties in the spike counts resolve to the lowest class index.
    """
    started = time.perf_counter()
    correct = 0
    counts: dict[tuple[int, int], list[int]] = {}
    with torch.no_grad():
        for i, start in enumerate(range(0, len(dataset), batch_size)):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            x = dataset.spikes(idx, T, _batch_seed(EVAL_SEED, 0, i), dtype=net.dtype)
            result = forward(net, x, T)
            correct += int((result.scores.argmax(1) == dataset.labels[torch.as_tensor(idx)]).sum())
            for key, (s, e) in result.counts.items():
                acc = counts.setdefault(key, [0, 0])
                acc[0] += s
                acc[1] += e
    block_rates = tuple(
        pooled_rate([tuple(c) for k, c in counts.items() if k[0] == b]) for b in range(len(net.plan.blocks))
    )
    rate = pooled_rate([tuple(c) for c in counts.values()])
    return EvalReport(correct / len(dataset), block_rates, rate, net.macs(), time.perf_counter() - started)


def accuracy_drop(reference_accuracy: float, snn_accuracy: float) -> float:
    """Reference minus SNN accuracy, in the unit of the inputs.

    Fractions in [0, 1] are expected; if either value exceeds 1 both are read
    as percentages in [0, 100].  The result may be negative.
    """
    upper = 100.0 if max(reference_accuracy, snn_accuracy) > 1 else 1.0
    for a in (reference_accuracy, snn_accuracy):
        if not math.isfinite(a) or not 0.0 <= a <= upper:
            raise ValueError(f"accuracy {a} outside [0, {upper:g}]")
    return reference_accuracy - snn_accuracy


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, store: WeightStore, seed: int | None = None) -> None:
    """Versioned little-endian container of the store's tensors as float32."""
    seed = store.seed if seed is None else seed
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), store.plan.digest(),
             struct.pack("<q", int(seed)), struct.pack("<I", len(store.tensors))]
    for name, t in store.tensors.items():
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    version: int
    plan_digest: bytes
    seed: int
    tensors: dict[str, Tensor]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[pos:pos + 32]
    pos += 32
    seed, count = struct.unpack_from("<qI", raw, pos)
    pos += 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(dims)) * 4
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(dims)
        pos += size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(version, digest, seed, tensors)


def store_from_checkpoint(plan: NetworkPlan, ckpt: Checkpoint) -> WeightStore:
    if ckpt.plan_digest != plan.digest():
        raise StoreMismatch("checkpoint was written for a different plan")
    return WeightStore(plan, dict(ckpt.tensors), ckpt.seed)
