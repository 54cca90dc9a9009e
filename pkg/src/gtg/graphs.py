"""Weighted-graph data model, validation, normalization and file I/O.

Graphs are small (tens of nodes), dense, undirected and nonnegatively
weighted, stored as full float64 adjacency matrices.  Everything here is
immutable after construction and every function is pure.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

# 9 significant digits: enough for weights in [0, 1] and stable under a
# parse/format round trip, so save(load(f)) reproduces f byte for byte.
FLOAT_FORMAT = "%.9g"


class GraphFormatError(ValueError):
    """A graph file is malformed or violates a graph invariant."""


class ParseError(GraphFormatError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"line {line}: not a comma-separated float row" + (f" ({detail})" if detail else ""))
        self.line = line


class NonSquareError(GraphFormatError):
    def __init__(self, rows: int, cols: int):
        super().__init__(f"expected a square matrix, got {rows} rows but a row of {cols} values")
        self.rows = rows
        self.cols = cols


class InvalidGraphError(GraphFormatError):
    """Wraps the validation violations found while loading a graph file."""

    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = list(violations)


@dataclasses.dataclass(frozen=True)
class NonSymmetric:
    i: int
    j: int
    delta: float


@dataclasses.dataclass(frozen=True)
class NegativeWeight:
    i: int
    j: int


@dataclasses.dataclass(frozen=True)
class NonzeroDiagonal:
    i: int


@dataclasses.dataclass(frozen=True)
class NonFiniteEntry:
    i: int
    j: int


@dataclasses.dataclass(frozen=True)
class WeightedGraph:
    """Symmetric nonnegative adjacency matrix with zero diagonal.

    The adjacency matrix doubles as the node feature matrix: row i is the
    feature vector of node i.  The array is copied and frozen, so instances
    are safe to share across threads.
    """

    adj: np.ndarray

    def __post_init__(self):
        adj = np.array(self.adj, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)

    @property
    def n(self) -> int:
        return self.adj.shape[0]


@dataclasses.dataclass(frozen=True)
class BinaryGraph:
    """Symmetric 0/1 adjacency with zero diagonal (edge-existence matrix)."""

    adj: np.ndarray

    def __post_init__(self):
        adj = np.array(self.adj, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)

    @property
    def n(self) -> int:
        return self.adj.shape[0]


@dataclasses.dataclass(frozen=True)
class GraphPair:
    source: WeightedGraph
    target: WeightedGraph
    id: str

    def __post_init__(self):
        if self.source.n != self.target.n:
            raise ValueError(f"pair {self.id!r}: source has {self.source.n} nodes, target {self.target.n}")

    @property
    def n(self) -> int:
        return self.source.n


def validate(g: WeightedGraph) -> list:
    """Return every invariant violation of ``g`` (empty list means valid).

    Symmetry is checked with zero tolerance: files are written symmetric,
    so any asymmetry is a real defect, not rounding.
    """
    a = g.adj
    out = []
    for i, j in np.argwhere(~np.isfinite(a)):
        if i <= j:
            out.append(NonFiniteEntry(int(i), int(j)))
    finite = np.where(np.isfinite(a), a, 0.0)
    for i, j in np.argwhere(finite < 0):
        if i <= j:
            out.append(NegativeWeight(int(i), int(j)))
    for (i,) in np.argwhere(np.diag(finite) != 0):
        out.append(NonzeroDiagonal(int(i)))
    asym = finite != finite.T
    for i, j in np.argwhere(asym):
        if i < j:
            out.append(NonSymmetric(int(i), int(j), float(abs(finite[i, j] - finite[j, i]))))
    return out


def binarize(g: WeightedGraph, eps: float = 0.0) -> BinaryGraph:
    """Edge-existence matrix: 1 where weight > eps."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return BinaryGraph((g.adj > eps).astype(np.float64))


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Self-loop symmetric renormalization D~^{-1/2} (A + I) D~^{-1/2}.

    The injected self-loops guarantee positive degrees, so isolated nodes
    reduce to a lone self-loop entry of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def minmax_normalize(g: WeightedGraph) -> WeightedGraph:
    """Scale weights into [0, 1] by dividing by the max entry.

    All-zero graphs are returned unchanged; zero entries stay zero so the
    edge support is preserved.
    """
    mx = float(g.adj.max()) if g.n > 0 else 0.0
    if mx == 0.0:
        return g
    return WeightedGraph(g.adj / mx)


# ---------------------------------------------------------------------------
# file I/O
#
# Graph file: N lines, N comma-separated floats per line, no header, LF
# endings.  Dataset directory: <root>/source/<id>.csv, <root>/target/<id>.csv
# plus <root>/manifest.json.


def format_matrix(a: np.ndarray) -> str:
    return "".join(",".join(FLOAT_FORMAT % v for v in row) + "\n" for row in np.asarray(a, dtype=np.float64))


def save_matrix(a: np.ndarray, path) -> None:
    Path(path).write_bytes(format_matrix(a).encode("ascii"))


def load_matrix(path) -> np.ndarray:
    """Parse a CSV matrix without graph validation (used for e.g. logits)."""
    text = Path(path).read_bytes().decode("ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        rows.append(row)
    if not rows:
        raise ParseError(1, "empty file")
    width = len(rows[0])
    for row in rows[1:]:
        if len(row) != width:
            raise NonSquareError(len(rows), len(row))
    if width != len(rows):
        raise NonSquareError(len(rows), width)
    return np.array(rows, dtype=np.float64)


def save_graph(g: WeightedGraph, path) -> None:
    save_matrix(g.adj, path)


def load_graph(path) -> WeightedGraph:
    g = WeightedGraph(load_matrix(path))
    violations = validate(g)
    if violations:
        raise InvalidGraphError(violations)
    return g


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_pair(root, pair_id: str) -> GraphPair:
    root = Path(root)
    return GraphPair(
        source=load_graph(root / "source" / f"{pair_id}.csv"),
        target=load_graph(root / "target" / f"{pair_id}.csv"),
        id=pair_id,
    )


def load_dataset(root, ids=None) -> list[GraphPair]:
    """Load the pairs named by ``ids`` (default: all ids in the manifest)."""
    if ids is None:
        ids = load_manifest(root)["ids"]
    return [load_pair(root, pid) for pid in ids]
