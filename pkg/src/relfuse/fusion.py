"""Distribution fusion in anchor-relative space.

The forward transform carries a model's next-token distribution into the
shared anchor space (p . M for a row-normalized matrix M); per-model
results are averaged there; the inverse transform gradient-searches a
distribution on the main model's vocabulary whose image matches the
average, measured by KL divergence.

The KL direction is KL(aggregate || candidate): the aggregated
representation is the fixed reference, so the search is penalized for
failing to cover aggregated mass.  A raw gradient step leaves the
simplex; each iterate steps along the gradient's tangent component and
is then clamped at a small floor and renormalized, which together act as
the simplex projection.  With a zero step size the input distribution is
returned bit-for-bit unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, NumericError
from .relspace import RelativeMatrix

PROB_FLOOR = 1e-12
EARLY_STOP_LOSS = 1e-9
DEFAULT_ETA = 0.1
DEFAULT_STEPS = 5


@dataclass
class AbsoluteDistribution:
    """A probability distribution over one model's vocabulary."""

    values: np.ndarray
    model_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ArgumentError(f"distribution must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("distribution contains non-finite entries")
        if np.any(arr < 0.0):
            raise ArgumentError("distribution contains negative entries")
        total = float(arr.sum())
        if abs(total - 1.0) > 1e-6:
            raise ArgumentError(f"distribution sums to {total}, expected 1")
        self.values = arr

    @classmethod
    def uniform(cls, n: int, model_index: int = 0) -> "AbsoluteDistribution":
        return cls(np.full(n, 1.0 / n), model_index)

    @classmethod
    def one_hot(cls, n: int, hot: int, model_index: int = 0) -> "AbsoluteDistribution":
        values = np.zeros(n)
        values[hot] = 1.0
        return cls(values, model_index)

    def __len__(self) -> int:
        return self.values.size


@dataclass
class EnsembleConfig:
    """Knobs for the fusion search.

    eta is the relative-space step size and steps the iteration budget;
    weights override the default uniform model averaging; main selects
    whose vocabulary the fused distribution lives on ("auto" picks the
    model that scores best on a validation split).
    """

    eta: float = DEFAULT_ETA
    steps: int = DEFAULT_STEPS
    weights: tuple[float, ...] | None = None
    main: int | str = "auto"
    prob_floor: float = PROB_FLOOR
    early_stop_loss: float = EARLY_STOP_LOSS

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0.0):
            raise ArgumentError(f"eta must be finite and >= 0, got {self.eta}")
        if self.steps < 0:
            raise ArgumentError(f"steps must be >= 0, got {self.steps}")
        if self.prob_floor <= 0.0:
            raise ArgumentError("prob_floor must be > 0")
        if self.early_stop_loss < 0.0:
            raise ArgumentError("early_stop_loss must be >= 0")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ArgumentError(
                    "weights must be non-negative and sum to 1 within 1e-9"
                )
            self.weights = tuple(float(x) for x in w)
        if isinstance(self.main, str):
            if self.main != "auto":
                raise ArgumentError(f"main must be 'auto' or a model index, got {self.main!r}")
        elif self.main < 0:
            raise ArgumentError(f"main model index must be >= 0, got {self.main}")


def _vector(p: AbsoluteDistribution | np.ndarray | Sequence[float]) -> np.ndarray:
    if isinstance(p, AbsoluteDistribution):
        return p.values
    return np.asarray(p, dtype=np.float64)


def to_relative(
    p: AbsoluteDistribution | np.ndarray,
    matrix: RelativeMatrix,
    allow_raw: bool = False,
) -> np.ndarray:
    """Carry a vocabulary distribution into anchor space: r = p . M.

    For a normalized matrix this is a convex combination of simplex rows,
    so r is itself a distribution over anchors.  Raw matrices are refused
    unless allow_raw is set (the normalization ablation runs them through
    the identical code path on purpose).
    """
    vec = _vector(p)
    if vec.size != matrix.rows:
        raise ArgumentError(
            f"distribution length {vec.size} != matrix rows {matrix.rows}"
        )
    if not matrix.normalized and not allow_raw:
        raise ArgumentError("matrix is not row-normalized (pass allow_raw to override)")
    return vec @ matrix.values.astype(np.float64)


def aggregate(
    rs: Sequence[np.ndarray], weights: Sequence[float] | None = None
) -> np.ndarray:
    """Weighted average of relative representations; uniform by default."""
    if not rs:
        raise ArgumentError("nothing to aggregate")
    length = rs[0].shape[0] if hasattr(rs[0], "shape") else len(rs[0])
    stacked = np.empty((len(rs), length), dtype=np.float64)
    for i, r in enumerate(rs):
        arr = np.asarray(r, dtype=np.float64)
        if arr.shape != (length,):
            raise ArgumentError(
                f"representation {i} has shape {arr.shape}, expected ({length},)"
            )
        stacked[i] = arr
    if weights is None:
        w = np.full(len(rs), 1.0 / len(rs))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(rs),):
            raise ArgumentError(
                f"{len(rs)} representations but {w.size} weights"
            )
    return w @ stacked


def kl_loss(
    target: np.ndarray,
    candidate: np.ndarray,
    floor: float = PROB_FLOOR,
) -> float:
    """KL(target || candidate) with floored logs.

    Candidate entries below the floor are lifted to it inside the log;
    target entries below the floor contribute nothing.
    """
    t = np.asarray(target, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    if t.shape != c.shape:
        raise ArgumentError(f"shape mismatch: {t.shape} vs {c.shape}")
    mask = t >= floor
    if not mask.any():
        return 0.0
    tm = t[mask]
    denom = np.maximum(c[mask], floor)
    return float(np.sum(tm * np.log(tm / denom)))


def kl_gradient(
    target: np.ndarray,
    p: AbsoluteDistribution | np.ndarray,
    matrix: RelativeMatrix,
    floor: float = PROB_FLOOR,
    allow_raw: bool = False,
) -> np.ndarray:
    """Exact gradient of kl_loss(target, p . M) with respect to p.

    Component i is -sum_a target_a * M[i][a] / max(r_a, floor), with
    target entries below the floor contributing nothing (mirroring the
    loss).
    """
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.size != matrix.anchors:
        raise ArgumentError(
            f"target length {tgt.size} != anchor count {matrix.anchors}"
        )
    r = to_relative(p, matrix, allow_raw=allow_raw)
    denom = np.maximum(r, floor)
    ratio = np.where(tgt >= floor, tgt / denom, 0.0)
    return -(matrix.values.astype(np.float64) @ ratio)


def inverse_transform(
    target: np.ndarray,
    p_init: AbsoluteDistribution,
    matrix: RelativeMatrix,
    cfg: EnsembleConfig,
    allow_raw: bool = False,
) -> tuple[AbsoluteDistribution, list[float]]:
    """Gradient-search a distribution whose anchor image matches the target.

    Runs at most cfg.steps iterations of: compute loss, step against the
    gradient, clamp at cfg.prob_floor, renormalize.  Stops early once the
    loss drops below cfg.early_stop_loss.  Returns the final distribution
    and the loss trace (before each step taken, plus after the last).

    A zero eta performs no update at all, so the initial distribution
    comes back unchanged to the bit.
    """
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.size != matrix.anchors:
        raise ArgumentError(
            f"target length {tgt.size} != anchor count {matrix.anchors}"
        )
    if len(p_init) != matrix.rows:
        raise ArgumentError(
            f"init distribution length {len(p_init)} != matrix rows {matrix.rows}"
        )
    if not matrix.normalized and not allow_raw:
        raise ArgumentError("matrix is not row-normalized (pass allow_raw to override)")
    m64 = matrix.values.astype(np.float64)
    p = p_init.values.copy()
    losses: list[float] = []
    stopped = False
    for step in range(cfg.steps):
        r = p @ m64
        loss = kl_loss(tgt, r, floor=cfg.prob_floor)
        if not math.isfinite(loss):
            raise NumericError("loss is not finite", step=step)
        losses.append(loss)
        if loss < cfg.early_stop_loss:
            stopped = True
            break
        denom = np.maximum(r, cfg.prob_floor)
        ratio = np.where(tgt >= cfg.prob_floor, tgt / denom, 0.0)
        grad = -(m64 @ ratio)
        if cfg.eta != 0.0:
            # Step along the gradient's simplex-tangent component.  The
            # constant component must not move the point (renormalizing a
            # uniform push is a no-op on the simplex); stepping along the
            # raw gradient and dividing by the sum would instead leak that
            # component into a drift toward uniform and stall the search
            # away from the optimum.
            p = p - cfg.eta * (grad - grad.mean())
            p = np.maximum(p, cfg.prob_floor)
            p = p / p.sum()
        if not np.all(np.isfinite(p)):
            raise NumericError("iterate contains NaN/Inf", step=step)
    if not stopped:
        loss = kl_loss(tgt, p @ m64, floor=cfg.prob_floor)
        if not math.isfinite(loss):
            raise NumericError("loss is not finite", step=cfg.steps)
        losses.append(loss)
    return AbsoluteDistribution(p, model_index=p_init.model_index), losses
