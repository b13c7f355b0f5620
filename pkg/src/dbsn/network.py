"""Weight-sharing supernet built from cells of mixed dense operations.

A cell has ``num_nodes`` nodes. Node 1 is the cell input; node j sums the
edge outputs ``sum_k alpha[(i,j), k] * op_k(node_i)`` over all i < j. The cell
emits the intermediate nodes concatenated with its input. Cells share one
structure but own their weights, and a fixed affine downsampling module
compresses the concatenation before the next cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .concrete import EdgeSample
from .tensor import Tensor

OP_KINDS = ("zero", "identity", "affine", "affine_relu")
DEFAULT_OPS = ("zero", "identity", "affine", "affine_relu")

# Hook applied to every affine operation output (MC dropout uses it).
OutputHook = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class CellSpec:
    num_nodes: int = 4
    op_kinds: tuple[str, ...] = DEFAULT_OPS
    node_width: int = 8
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "op_kinds", tuple(self.op_kinds))
        if self.num_nodes < 2:
            raise ValueError("a cell needs at least two nodes")
        if len(self.op_kinds) < 2:
            raise ValueError("need at least two candidate operations")
        unknown = set(self.op_kinds) - set(OP_KINDS)
        if unknown:
            raise ValueError(f"unknown operation kinds {sorted(unknown)}")

    @property
    def ops_per_edge(self) -> int:
        return len(self.op_kinds)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Edges (i, j), 0-based, in the order nodes are evaluated."""
        return [(i, j) for j in range(1, self.num_nodes) for i in range(j)]

    @property
    def num_edges(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    num_classes: int
    num_cells: int = 2
    cell: CellSpec = field(default_factory=CellSpec)
    compression: float = 0.4

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 2 or self.num_cells < 1:
            raise ValueError("invalid network dimensions")
        if not 0 < self.compression <= 1:
            raise ValueError("compression must be in (0, 1]")

    def cell_widths(self) -> list[int]:
        """Input width of each cell."""
        widths = [self.cell.node_width]
        for _ in range(self.num_cells - 1):
            widths.append(math.ceil(self.compression * self.cell_output_width(widths[-1])))
        return widths

    def cell_output_width(self, width: int) -> int:
        return self.cell.num_nodes * width


WeightStore = dict  # name -> Tensor, insertion-ordered


def _affine_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.W", f"{prefix}.b"


def weight_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def affine(prefix, fan_in, fan_out):
        w, b = _affine_names(prefix)
        shapes[w] = (fan_in, fan_out)
        shapes[b] = (fan_out,)

    widths = spec.cell_widths()
    affine("stem", spec.input_dim, widths[0])
    for c, width in enumerate(widths):
        for e, _ in enumerate(spec.cell.edges):
            for k, kind in enumerate(spec.cell.op_kinds):
                if kind in ("affine", "affine_relu"):
                    affine(f"cell{c}.e{e}.op{k}", width, width)
        if c + 1 < len(widths):
            affine(f"down{c}", spec.cell_output_width(width), widths[c + 1])
    affine("head", spec.cell_output_width(widths[-1]), spec.num_classes)
    return shapes


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> WeightStore:
    """He-normal matrices, zero biases."""
    store: WeightStore = {}
    for name, shape in weight_shapes(spec).items():
        if name.endswith(".W"):
            values = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
        else:
            values = np.zeros(shape)
        store[name] = Tensor(values, requires_grad=True, dtype=dtype)
    return store


def init_theta(spec: NetworkSpec, rng: np.random.Generator, scale: float = 1e-3, dtype=np.float64) -> Tensor:
    """Structure logits, one row per edge."""
    shape = (spec.cell.num_edges, spec.cell.ops_per_edge)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)


def uniform_structure(spec: NetworkSpec, dtype=np.float64) -> EdgeSample:
    shape = (spec.cell.num_edges, spec.cell.ops_per_edge)
    return EdgeSample(Tensor(np.full(shape, -math.log(spec.cell.ops_per_edge)), dtype=dtype))


def affine(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    w, b = _affine_names(prefix)
    return x @ weights[w] + T.repeat_rows(weights[b], x.shape[0])


def apply_op(kind: str, x: Tensor, weights: Mapping[str, Tensor], prefix: str, hook: OutputHook | None = None) -> Tensor | None:
    """One candidate operation; ``None`` stands for the zero operation."""
    if kind == "zero":
        return None
    if kind == "identity":
        return x
    out = affine(x, weights, prefix)
    if hook is not None:
        out = hook(out)
    if kind == "affine_relu":
        out = T.relu(out)
    return out


def edge_forward(
    x: Tensor,
    alpha_edge: Tensor,
    weights: Mapping[str, Tensor],
    kinds,
    prefix: str = "",
    hook: OutputHook | None = None,
) -> Tensor:
    """Mix the K operation outputs on one edge by ``alpha_edge``."""
    if alpha_edge.shape != (len(kinds),):
        raise T.ShapeError(f"alpha {alpha_edge.shape} for {len(kinds)} operations")
    out = None
    for k, kind in enumerate(kinds):
        y = apply_op(kind, x, weights, f"{prefix}op{k}", hook)
        if y is None:
            continue
        if y.shape != x.shape:
            raise T.ShapeError(f"operation {kind} maps {x.shape} to {y.shape}")
        term = T.select(alpha_edge, k) * y
        out = term if out is None else out + term
    if out is None:
        return Tensor(np.zeros(x.shape), dtype=x.dtype)
    return out


def cell_forward(
    x: Tensor,
    alpha: Tensor,
    weights: Mapping[str, Tensor],
    spec: CellSpec,
    cell_index: int = 0,
    hook: OutputHook | None = None,
) -> Tensor:
    """Evaluate the DAG; ``alpha`` is the ``[E, K]`` mask (not its log)."""
    nodes = [x]
    edges = spec.edges
    e = 0
    for j in range(1, spec.num_nodes):
        acc = None
        for i in range(j):
            assert edges[e] == (i, j)
            y = edge_forward(nodes[i], T.select(alpha, e), weights, spec.op_kinds, f"cell{cell_index}.e{e}.", hook)
            acc = y if acc is None else acc + y
            e += 1
        if spec.normalize:
            acc = T.standardize(acc)
        nodes.append(acc)
    return T.concat(nodes[1:] + [x], axis=1)


def network_forward(
    x: Tensor,
    structure: EdgeSample | Tensor,
    weights: Mapping[str, Tensor],
    spec: NetworkSpec,
    hook: OutputHook | None = None,
) -> Tensor:
    """Class logits ``[batch, num_classes]`` for one structure sample."""
    x = T.as_tensor(x)
    if x.values.ndim != 2 or x.shape[1] != spec.input_dim:
        raise T.ShapeError(f"input {x.shape} for input_dim {spec.input_dim}")
    alpha = structure.alpha_tensor() if isinstance(structure, EdgeSample) else structure
    h = affine(x, weights, "stem")
    for c in range(spec.num_cells):
        h = cell_forward(h, alpha, weights, spec.cell, c, hook)
        if c + 1 < spec.num_cells:
            h = affine(T.relu(h), weights, f"down{c}")
    return affine(h, weights, "head")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-datum negative log-likelihood ``[batch]``."""
    return -T.gather(T.log_softmax(logits, axis=1), labels)
