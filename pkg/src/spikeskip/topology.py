"""Block DAGs and their skip-connection adjacency matrices.

Vertex 0 of a block is the block input; vertices ``1..depth`` are its layers.
Layer ``v`` always receives vertex ``v-1`` through the sequential edge.  The
searchable part of a block is the set of *skip slots* ``(u, v)`` with
``v - u >= 2``, each holding one of three codes::

    0  no connection
    1  dense-style skip: selected channels of ``u`` are concatenated
    2  additive skip: output of ``u`` is summed element-wise

Slots are kept in canonical order (``v`` ascending, then ``u`` ascending);
enumeration, Hamming distances, serialization and the GP encoding all use it.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .engine import LifParams

NONE, DSC, ASC = 0, 1, 2
CODES = {"none": NONE, "dsc": DSC, "asc": ASC}
TAGS = {code: tag for tag, code in CODES.items()}
SEQUENTIAL_CODE = ASC
MAX_ENUM_DEPTH = 8


class TopologyError(ValueError):
    pass


class ShapeError(TopologyError):
    """Raised when an additive skip joins tensors of different shapes."""

    kind = "asc_shape_mismatch"


class SpaceExhausted(TopologyError):
    pass


def encode_code(tag: str) -> int:
    try:
        return CODES[tag]
    except KeyError:
        raise TopologyError(f"unknown connection tag {tag!r}") from None


def decode_code(code: int) -> str:
    try:
        return TAGS[int(code)]
    except (KeyError, ValueError, TypeError):
        raise TopologyError(f"connection code must be 0, 1 or 2, got {code!r}") from None


def skip_slots(depth: int) -> list[tuple[int, int]]:
    if depth < 1:
        raise TopologyError(f"block depth must be >= 1, got {depth}")
    return [(u, v) for v in range(2, depth + 1) for u in range(0, v - 1)]


def n_slots(depth: int) -> int:
    return depth * (depth - 1) // 2


def max_skip(v: int, depth: int | None = None) -> int:
    """Number of non-immediate predecessors of layer ``v`` (vertices ``0..v-2``)."""
    if v < 1 or (depth is not None and v > depth):
        raise TopologyError(f"layer vertex {v} out of range")
    return v - 1


def clamp_n_skip(requested: int, v: int) -> int:
    if requested < 0:
        raise TopologyError(f"n_skip must be non-negative, got {requested}")
    return min(requested, max_skip(v))


class Violation(NamedTuple):
    kind: str  # code_out_of_range | missing_sequential_edge | backward_entry
    u: int
    v: int


@dataclass(frozen=True)
class BlockAdjacency:
    depth: int
    codes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        if self.depth < 1:
            raise TopologyError(f"block depth must be >= 1, got {self.depth}")
        if len(self.codes) != n_slots(self.depth):
            raise TopologyError(
                f"depth {self.depth} has {n_slots(self.depth)} skip slots, got {len(self.codes)} codes"
            )
        for c in self.codes:
            if c not in TAGS:
                raise TopologyError(f"connection code must be 0, 1 or 2, got {c}")

    @classmethod
    def chain(cls, depth: int) -> "BlockAdjacency":
        return cls(depth, (NONE,) * n_slots(depth))

    @classmethod
    def from_edges(cls, depth: int, edges: dict[tuple[int, int], int]) -> "BlockAdjacency":
        slots = skip_slots(depth)
        unknown = set(edges) - set(slots)
        if unknown:
            raise TopologyError(f"not skip slots of a depth-{depth} block: {sorted(unknown)}")
        return cls(depth, tuple(edges.get(s, NONE) for s in slots))

    @classmethod
    def from_matrix(cls, matrix) -> "BlockAdjacency":
        m = np.asarray(matrix)
        violations = validate(m)
        if violations:
            raise TopologyError(f"invalid adjacency matrix: {violations}")
        depth = m.shape[0] - 1
        return cls(depth, tuple(int(m[u, v]) for u, v in skip_slots(depth)))

    @property
    def slots(self) -> list[tuple[int, int]]:
        return skip_slots(self.depth)

    def code(self, u: int, v: int) -> int:
        if v - u == 1:
            return SEQUENTIAL_CODE
        return self.codes[self.slots.index((u, v))]

    def with_code(self, u: int, v: int, code: int) -> "BlockAdjacency":
        codes = list(self.codes)
        codes[self.slots.index((u, v))] = code
        return BlockAdjacency(self.depth, tuple(codes))

    def sources(self, v: int, code: int | None = None) -> list[tuple[int, int]]:
        """Skip sources ``(u, code)`` feeding layer ``v`` in ascending ``u``."""
        out = []
        for (u, w), c in zip(self.slots, self.codes):
            if w == v and c != NONE and (code is None or c == code):
                out.append((u, c))
        return out

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.depth + 1, self.depth + 1), dtype=np.int64)
        for v in range(1, self.depth + 1):
            m[v - 1, v] = SEQUENTIAL_CODE
        for (u, v), c in zip(self.slots, self.codes):
            m[u, v] = c
        return m

    def serialize(self) -> str:
        return f"{self.depth}:" + "".join(str(c) for c in self.codes)

    @classmethod
    def parse(cls, text: str) -> "BlockAdjacency":
        head, sep, body = text.strip().partition(":")
        if not sep:
            raise TopologyError(f"adjacency text must look like 'depth:codes', got {text!r}")
        try:
            depth = int(head)
            codes = tuple(int(ch) for ch in body)
        except ValueError:
            raise TopologyError(f"malformed adjacency text {text!r}") from None
        return cls(depth, codes)

    def __str__(self):
        return self.serialize()


Assignment = tuple[BlockAdjacency, ...]


def serialize_assignment(assignment: Sequence[BlockAdjacency]) -> str:
    return "/".join(a.serialize() for a in assignment)


def parse_assignment(text: str) -> Assignment:
    return tuple(BlockAdjacency.parse(part) for part in text.strip().split("/"))


def validate(adj) -> list[Violation]:
    """Check an adjacency matrix (or :class:`BlockAdjacency`); ``[]`` means valid."""
    m = adj.matrix() if isinstance(adj, BlockAdjacency) else np.asarray(adj)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise TopologyError(f"adjacency matrix must be square with size >= 2, got shape {m.shape}")
    n = m.shape[0]
    found = []
    for u in range(n):
        for v in range(n):
            c = m[u, v]
            if c not in (NONE, DSC, ASC):
                found.append(Violation("code_out_of_range", u, v))
            elif u >= v and c != NONE:
                found.append(Violation("backward_entry", u, v))
    for v in range(1, n):
        if m[v - 1, v] == NONE:
            found.append(Violation("missing_sequential_edge", v - 1, v))
    return found


def space_size(depth: int) -> int:
    return 3 ** n_slots(depth)


def enumerate_block(depth: int) -> Iterator[BlockAdjacency]:
    """All adjacency matrices of a depth-``depth`` block, lexicographic in slot codes."""
    if depth > MAX_ENUM_DEPTH:
        raise TopologyError(
            f"refusing to enumerate 3^{n_slots(depth)} matrices for depth {depth}; sample instead"
        )
    for codes in itertools.product((NONE, DSC, ASC), repeat=n_slots(depth)):
        yield BlockAdjacency(depth, codes)


def _index_to_codes(index: int, radices: Sequence[int]) -> tuple[int, ...]:
    codes = []
    for r in reversed(radices):
        index, c = divmod(index, r)
        codes.append(c)
    return tuple(reversed(codes))


def sample_random(depth: int, seed: int, exclude=()) -> BlockAdjacency:
    """Uniform draw from the depth-``depth`` matrices not in ``exclude``."""
    space = SearchSpace.full((depth,))
    return space.sample(seed, {(a,) if isinstance(a, BlockAdjacency) else tuple(a) for a in exclude})[0]


def hamming_distance(a, b) -> int:
    """Number of skip slots with differing codes; accepts blocks or whole assignments."""
    if isinstance(a, BlockAdjacency):
        a, b = (a,), (b,)
    if len(a) != len(b):
        raise TopologyError("assignments have different block counts")
    total = 0
    for x, y in zip(a, b):
        if x.depth != y.depth:
            raise TopologyError(f"depth mismatch: {x.depth} vs {y.depth}")
        total += sum(cx != cy for cx, cy in zip(x.codes, y.codes))
    return total


def n_skip_of(adj: BlockAdjacency, v: int) -> int:
    return len(adj.sources(v))


# --- layers and plans -------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str = "conv"  # conv | fc
    out_channels: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    neuron: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise TopologyError(f"layer kind must be 'conv' or 'fc', got {self.kind!r}")
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise TopologyError(f"layer {self.index}: dimensions must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2 if self.kind == "conv" else 0)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "fc":
            return (self.out_channels,)
        if len(in_shape) != 3:
            raise TopologyError(f"conv layer {self.index} needs (C, H, W) input, got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise TopologyError(f"conv layer {self.index} collapses spatial dims {in_shape}")
        return (self.out_channels, ho, wo)

    def to_dict(self) -> dict:
        return {
            "index": self.index, "kind": self.kind, "out_channels": self.out_channels,
            "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
            "beta": self.neuron.beta, "threshold": self.neuron.threshold,
            "reset_mode": self.neuron.reset_mode,
        }


def n_selected(channels: int, ratio: float) -> int:
    """Channels a dense-style skip takes from a source of ``channels`` channels."""
    return max(1, min(channels, math.floor(ratio * channels)))


def flatten_shape(shape: tuple[int, ...]) -> tuple[int]:
    return (int(np.prod(shape)),)


@dataclass(frozen=True)
class BlockPlan:
    layers: tuple[LayerSpec, ...]
    adjacency: BlockAdjacency | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise TopologyError("a block needs at least one layer")
        if len({l.index for l in self.layers}) != len(self.layers):
            raise TopologyError("layer indices must be unique within a block")
        if len({l.kind for l in self.layers}) != 1:
            raise TopologyError("layers of one block must all be conv or all be fc")
        if self.adjacency is None:
            object.__setattr__(self, "adjacency", BlockAdjacency.chain(len(self.layers)))
        elif self.adjacency.depth != len(self.layers):
            raise TopologyError("block adjacency depth does not match its layer count")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def kind(self) -> str:
        return self.layers[0].kind


@dataclass(frozen=True)
class NetworkPlan:
    """Reference topology: blocks joined by single sequential connections plus a dense readout."""

    blocks: tuple[BlockPlan, ...]
    input_shape: tuple[int, ...]
    n_classes: int
    reference_accuracy: float | None = None
    dsc_ratio: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.blocks:
            raise TopologyError("a plan needs at least one block")
        if self.n_classes < 2:
            raise TopologyError("need at least two classes")
        if not 0.0 < self.dsc_ratio <= 1.0:
            raise TopologyError(f"dsc_ratio must lie in (0, 1], got {self.dsc_ratio}")
        self.vertex_shapes()  # raises on incompatible consecutive blocks

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(b.depth for b in self.blocks)

    def initial_assignment(self) -> Assignment:
        return tuple(b.adjacency for b in self.blocks)

    def chain_assignment(self) -> Assignment:
        return tuple(BlockAdjacency.chain(d) for d in self.depths)

    def block_input_shape(self, b: int, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.blocks[b].kind == "fc" and len(in_shape) != 1:
            return flatten_shape(in_shape)
        return in_shape

    def vertex_shapes(self, input_shape: tuple[int, ...] | None = None) -> list[list[tuple[int, ...]]]:
        """Per block, the output shape of every vertex (index 0 is the block input)."""
        shape = tuple(input_shape) if input_shape is not None else self.input_shape
        out = []
        for b, block in enumerate(self.blocks):
            shape = self.block_input_shape(b, shape)
            shapes = [shape]
            for layer in block.layers:
                shape = layer.output_shape(shape)
                shapes.append(shape)
            out.append(shapes)
        return out

    def readout_features(self) -> int:
        return int(np.prod(self.vertex_shapes()[-1][-1]))

    def allowed_codes(self, b: int) -> list[tuple[int, ...]]:
        """Codes each skip slot of block ``b`` may take given tensor shapes."""
        shapes = self.vertex_shapes()[b]
        allowed = []
        for u, v in skip_slots(self.blocks[b].depth):
            seq, src = shapes[v - 1], shapes[u]
            codes = [NONE]
            if seq[1:] == src[1:] and len(seq) == len(src):
                codes.append(DSC)
            if seq == src:
                codes.append(ASC)
            allowed.append(tuple(codes))
        return allowed

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {"layers": [l.to_dict() for l in blk.layers], "adjacency": blk.adjacency.serialize()}
                for blk in self.blocks
            ],
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "reference_accuracy": self.reference_accuracy,
            "dsc_ratio": self.dsc_ratio,
        }

    def digest(self) -> bytes:
        """SHA-256 of the plan's structure (reference accuracy excluded)."""
        d = self.to_dict()
        d.pop("reference_accuracy")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


def uniform_plan(
    n_blocks: int = 1,
    depth: int = 4,
    channels: int | Sequence[int] = 16,
    input_shape: tuple[int, ...] = (16, 4, 4),
    n_classes: int = 2,
    kind: str = "conv",
    kernel: int = 3,
    neuron: LifParams = LifParams(),
    dsc_ratio: float = 0.5,
    reference_accuracy: float | None = None,
) -> NetworkPlan:
    if isinstance(channels, int):
        channels = [channels] * depth
    if len(channels) != depth:
        raise TopologyError(f"need {depth} channel counts, got {len(channels)}")
    blocks = [
        BlockPlan(tuple(LayerSpec(i + 1, kind, c, kernel, neuron=neuron) for i, c in enumerate(channels)))
        for _ in range(n_blocks)
    ]
    return NetworkPlan(tuple(blocks), input_shape, n_classes, reference_accuracy, dsc_ratio)


def resolve_assignment(plan: NetworkPlan, assignment: Sequence[BlockAdjacency]) -> Assignment:
    assignment = tuple(assignment)
    if len(assignment) != len(plan.blocks):
        raise TopologyError(f"plan has {len(plan.blocks)} blocks, assignment has {len(assignment)}")
    for b, (blk, adj) in enumerate(zip(plan.blocks, assignment)):
        if adj.depth != blk.depth:
            raise TopologyError(f"block {b}: adjacency depth {adj.depth} != layer count {blk.depth}")
    return assignment


def layer_input_channels(
    plan: NetworkPlan, assignment: Sequence[BlockAdjacency], input_shape: tuple[int, ...] | None = None
) -> list[list[int]]:
    """Effective input width of every layer after skip merges.

    Raises :class:`ShapeError` for an additive skip between mismatched shapes.
    """
    assignment = resolve_assignment(plan, assignment)
    shapes = plan.vertex_shapes(input_shape)
    widths = []
    for b, adj in enumerate(assignment):
        row = []
        for v in range(1, adj.depth + 1):
            seq = shapes[b][v - 1]
            c_in = seq[0]
            for u, code in adj.sources(v):
                src = shapes[b][u]
                if code == ASC and src != seq:
                    raise ShapeError(
                        f"block {b}: additive skip {u}->{v} joins shape {src} onto {seq}"
                    )
                if code == DSC:
                    if len(src) != len(seq) or src[1:] != seq[1:]:
                        raise ShapeError(
                            f"block {b}: dense skip {u}->{v} has spatial dims {src[1:]} vs {seq[1:]}"
                        )
                    c_in += n_selected(src[0], plan.dsc_ratio)
            row.append(c_in)
        widths.append(row)
    return widths


def count_macs(
    plan: NetworkPlan, assignment: Sequence[BlockAdjacency], input_shape: tuple[int, ...] | None = None
) -> int:
    """Multiply-accumulates of one forward time step through all block layers.

    Conv: ``C_in_eff * C_out * k^2 * H_out * W_out``; dense: ``in_eff * out``.
    Concatenated channels widen ``C_in_eff``; additive skips leave it unchanged.
    The readout layer is not counted since it is the same for every assignment.
    """
    widths = layer_input_channels(plan, assignment, input_shape)
    shapes = plan.vertex_shapes(input_shape)
    total = 0
    for b, block in enumerate(plan.blocks):
        for v, layer in enumerate(block.layers, start=1):
            out = shapes[b][v]
            if layer.kind == "conv":
                total += widths[b][v - 1] * layer.out_channels * layer.kernel**2 * out[1] * out[2]
            else:
                total += widths[b][v - 1] * layer.out_channels
    return total


# --- search space -----------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Cartesian product of per-slot allowed codes across blocks."""

    depths: tuple[int, ...]
    allowed: tuple[tuple[tuple[int, ...], ...], ...]

    @classmethod
    def full(cls, depths: Sequence[int]) -> "SearchSpace":
        return cls(tuple(depths), tuple(tuple((NONE, DSC, ASC) for _ in range(n_slots(d))) for d in depths))

    @classmethod
    def from_plan(cls, plan: NetworkPlan) -> "SearchSpace":
        return cls(plan.depths, tuple(tuple(plan.allowed_codes(b)) for b in range(len(plan.blocks))))

    @property
    def slots(self) -> list[tuple[int, int, int]]:
        """Flat canonical slot list ``(block, u, v)``."""
        return [(b, u, v) for b, d in enumerate(self.depths) for u, v in skip_slots(d)]

    @property
    def n_slots(self) -> int:
        return sum(n_slots(d) for d in self.depths)

    @property
    def radices(self) -> list[int]:
        return [len(codes) for blk in self.allowed for codes in blk]

    @property
    def size(self) -> int:
        return math.prod(self.radices)

    def _split(self, flat: Sequence[int]) -> Assignment:
        out, pos = [], 0
        for d in self.depths:
            k = n_slots(d)
            out.append(BlockAdjacency(d, tuple(flat[pos:pos + k])))
            pos += k
        return tuple(out)

    def flat_codes(self, assignment: Sequence[BlockAdjacency]) -> tuple[int, ...]:
        return tuple(c for adj in assignment for c in adj.codes)

    def from_index(self, index: int) -> Assignment:
        if not 0 <= index < self.size:
            raise IndexError(f"index {index} outside search space of size {self.size}")
        digits = _index_to_codes(index, self.radices)
        allowed = [codes for blk in self.allowed for codes in blk]
        return self._split([allowed[i][d] for i, d in enumerate(digits)])

    def index_of(self, assignment: Sequence[BlockAdjacency]) -> int:
        allowed = [codes for blk in self.allowed for codes in blk]
        flat = self.flat_codes(assignment)
        if len(flat) != len(allowed):
            raise TopologyError("assignment does not belong to this search space")
        index = 0
        for codes, c in zip(allowed, flat):
            if c not in codes:
                raise TopologyError(f"code {c} not allowed in this slot")
            index = index * len(codes) + codes.index(c)
        return index

    def contains(self, assignment: Sequence[BlockAdjacency]) -> bool:
        try:
            self.index_of(assignment)
        except TopologyError:
            return False
        return True

    def enumerate(self) -> Iterator[Assignment]:
        if any(d > MAX_ENUM_DEPTH for d in self.depths):
            raise TopologyError("refusing to enumerate blocks deeper than 8; sample instead")
        allowed = [codes for blk in self.allowed for codes in blk]
        for flat in itertools.product(*allowed):
            yield self._split(flat)

    def sample(self, seed: int, exclude=()) -> Assignment:
        """Uniform draw over assignments not in ``exclude`` (a set of assignments)."""
        excluded = {self.index_of(a) for a in exclude}
        remaining = self.size - len(excluded)
        if remaining <= 0:
            raise SpaceExhausted("every assignment has already been sampled")
        rng = np.random.default_rng(seed)
        if self.size <= 1 << 20 and len(excluded) * 2 >= self.size:
            pick = int(rng.integers(remaining))
            for i in range(self.size):
                if i in excluded:
                    continue
                if pick == 0:
                    return self.from_index(i)
                pick -= 1
        while True:
            i = draw_index(rng, self.size)
            if i not in excluded:
                return self.from_index(i)

    def permutation(self, seed: int, count: int) -> list[Assignment]:
        """``count`` distinct uniform draws without replacement, in draw order."""
        if count > self.size:
            raise SpaceExhausted(f"cannot draw {count} distinct assignments from {self.size}")
        rng = np.random.default_rng(seed)
        if self.size <= 1 << 20:
            order = rng.permutation(self.size)[:count]
            return [self.from_index(int(i)) for i in order]
        seen: set[int] = set()
        picks = []
        while len(picks) < count:
            i = draw_index(rng, self.size)
            if i not in seen:
                seen.add(i)
                picks.append(self.from_index(i))
        return picks


def draw_index(rng: np.random.Generator, size: int) -> int:
    if size < 1 << 62:
        return int(rng.integers(size))
    # arbitrary precision for very large spaces
    bits = size.bit_length()
    while True:
        raw = int.from_bytes(rng.bytes((bits + 7) // 8), "little") & ((1 << bits) - 1)
        if raw < size:
            return raw
