"""Anchor-relative representation matrices built from embedding tables.

A model's tokens are re-described by their cosine similarity to a shared
set of anchor tokens.  Row-softmax normalization turns each row into a
distribution over anchors; tokens whose embedding carries no signal (zero
norm) get a uniform row instead of a zero vector.

Matrices are stored as 32-bit floats; dot products, norms, and softmax
are accumulated in 64-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, ConfigError
from .vocab import AnchorSet

ZERO_NORM = 1e-12

_DPE_MAGIC = b"DPE1"
_DPR_MAGIC = b"DPR1"


class EmbeddingTable:
    """A |V| x d matrix of token embeddings, one row per vocabulary id."""

    def __init__(self, values: np.ndarray, name: str = ""):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 2:
            raise ArgumentError(
                f"embedding table must be 2-D, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("embedding table contains non-finite entries")
        self.values = arr
        self.name = name
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        self.norms = norms
        self.flagged = norms < ZERO_NORM  # rows that cannot produce cosines

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class RelativeMatrix:
    """|V| x |A| matrix of a model's tokens described relative to anchors."""

    values: np.ndarray
    anchor_ids: tuple[int, ...]
    normalized: bool
    flagged_rows: frozenset[int] = field(default_factory=frozenset)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def anchors(self) -> int:
        return self.values.shape[1]


def build_relative_matrix(
    table: EmbeddingTable, anchors: AnchorSet, model_index: int
) -> RelativeMatrix:
    """Raw relative matrix: entry [i][k] = cosine(e_i, e_anchor_k).

    Rows whose embedding has (near-)zero norm are set to all zeros and
    flagged; they are rescued later by row normalization.
    """
    anchor_ids = anchors.per_model_ids[model_index]
    if any(a < 0 or a >= table.rows for a in anchor_ids):
        raise ArgumentError(
            f"anchor id out of range for table with {table.rows} rows"
        )
    if bool(np.all(table.flagged)):
        raise ArgumentError("embedding table has no usable (non-zero) rows")

    emb = table.values.astype(np.float64)
    norms = table.norms.copy()
    norms[norms < ZERO_NORM] = 1.0  # avoid division warnings; rows zeroed below
    unit = emb / norms[:, None]
    unit[table.flagged] = 0.0
    anchor_unit = unit[list(anchor_ids)]
    raw = unit @ anchor_unit.T
    np.clip(raw, -1.0, 1.0, out=raw)
    raw[table.flagged] = 0.0
    return RelativeMatrix(
        values=raw.astype(np.float32),
        anchor_ids=tuple(anchor_ids),
        normalized=False,
        flagged_rows=frozenset(np.flatnonzero(table.flagged).tolist()),
    )


def normalize_rows(matrix: RelativeMatrix) -> RelativeMatrix:
    """Row-softmax the raw matrix so each row is a distribution over anchors.

    All-zero rows (flagged tokens) become exactly uniform, which is the
    point: no token's relative description degenerates to a zero vector.
    """
    if matrix.normalized:
        raise ArgumentError("matrix is already normalized")
    raw = matrix.values.astype(np.float64)
    shifted = raw - raw.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)
    zero_rows = np.all(matrix.values == 0.0, axis=1)
    if zero_rows.any():
        out[zero_rows] = 1.0 / matrix.anchors
    return RelativeMatrix(
        values=out.astype(np.float32),
        anchor_ids=matrix.anchor_ids,
        normalized=True,
        flagged_rows=matrix.flagged_rows,
    )


def _row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def consistency(
    matrix_a: RelativeMatrix,
    matrix_b: RelativeMatrix,
    shared: Sequence[tuple[int, int]],
) -> tuple[list[float], float]:
    """Cosine between the two descriptions of each shared token.

    Both matrices must be built over the same anchors in the same order;
    the pairs give (row in matrix_a, row in matrix_b) for each shared token.
    Returns the per-token cosines and their mean.
    """
    if matrix_a.anchors != matrix_b.anchors:
        raise ArgumentError(
            f"anchor count mismatch: {matrix_a.anchors} vs {matrix_b.anchors}"
        )
    if not shared:
        raise ArgumentError("no shared token pairs given")
    va = matrix_a.values.astype(np.float64)
    vb = matrix_b.values.astype(np.float64)
    cosines = []
    for ia, ib in shared:
        cosines.append(_row_cosine(va[ia], vb[ib]))
    return cosines, float(np.mean(cosines))


@dataclass
class NeighborStats:
    """Nearest-neighbor similarity survey over an embedding table."""

    similarities: np.ndarray  # per usable token: max cosine to any other token
    counts: np.ndarray  # histogram of similarities over the given edges
    edges: np.ndarray
    flagged: int  # zero-norm rows excluded from the survey


def nn_distance_histogram(
    table: EmbeddingTable, bins: Sequence[float]
) -> NeighborStats:
    """For every usable token, its highest cosine to any other usable token.

    A pile-up of low values means many tokens sit in sparse regions of the
    embedding space, which is exactly when raw relative rows carry little
    signal.
    """
    usable = np.flatnonzero(~table.flagged)
    if usable.size < 2:
        raise ArgumentError(
            "need at least 2 usable embedding rows for a neighbor survey"
        )
    emb = table.values[usable].astype(np.float64)
    unit = emb / np.linalg.norm(emb, axis=1)[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    nearest = sim.max(axis=1)
    np.clip(nearest, -1.0, 1.0, out=nearest)
    edges = np.asarray(bins, dtype=np.float64)
    counts, _ = np.histogram(nearest, bins=edges)
    return NeighborStats(
        similarities=nearest,
        counts=counts,
        edges=edges,
        flagged=int(table.flagged.sum()),
    )


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write the binary embedding format: magic, u32 rows, u32 dim, f32 data."""
    with open(path, "wb") as fh:
        fh.write(_DPE_MAGIC)
        fh.write(struct.pack("<II", table.rows, table.dim))
        fh.write(np.ascontiguousarray(table.values, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, name: str = "") -> EmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != _DPE_MAGIC:
        raise ConfigError(f"{path}: bad magic {data[:4]!r}, expected {_DPE_MAGIC!r}")
    if len(data) < 12:
        raise ConfigError(f"{path}: truncated header")
    rows, dim = struct.unpack_from("<II", data, 4)
    expected = 12 + rows * dim * 4
    if len(data) != expected:
        raise ConfigError(
            f"{path}: expected {expected} bytes for {rows}x{dim}, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=12)
    return EmbeddingTable(values.reshape(rows, dim), name=name or Path(path).stem)


def save_relative_matrix(matrix: RelativeMatrix, path: str | Path) -> None:
    """Write the binary relative-matrix format.

    Layout: magic, u32 rows, u32 anchors, u8 normalized flag, f32 data
    row-major, then u32 anchor ids (this model's vocabulary ids).
    """
    with open(path, "wb") as fh:
        fh.write(_DPR_MAGIC)
        fh.write(struct.pack("<IIB", matrix.rows, matrix.anchors, int(matrix.normalized)))
        fh.write(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
        fh.write(np.asarray(matrix.anchor_ids, dtype="<u4").tobytes())


def load_relative_matrix(path: str | Path) -> RelativeMatrix:
    data = Path(path).read_bytes()
    if data[:4] != _DPR_MAGIC:
        raise ConfigError(f"{path}: bad magic {data[:4]!r}, expected {_DPR_MAGIC!r}")
    if len(data) < 13:
        raise ConfigError(f"{path}: truncated header")
    rows, anchors, flag = struct.unpack_from("<IIB", data, 4)
    expected = 13 + rows * anchors * 4 + anchors * 4
    if len(data) != expected:
        raise ConfigError(
            f"{path}: expected {expected} bytes for {rows}x{anchors}, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", count=rows * anchors, offset=13)
    ids = np.frombuffer(
        data, dtype="<u4", count=anchors, offset=13 + rows * anchors * 4
    )
    return RelativeMatrix(
        values=values.reshape(rows, anchors).copy(),
        anchor_ids=tuple(int(i) for i in ids),
        normalized=bool(flag),
    )
