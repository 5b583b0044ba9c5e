"""
Per-round quantisation codebook, nearest-neighbour encoding and error feedback.

The BS builds the codebook from its own fragments with k-means++ seeding
(no Lloyd refinement), counts how often its fragments land on each centroid
and orders the columns from most to least popular. Devices quantise their
fragments against the broadcast codebook.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch

from airsum import numkernel
from airsum.numkernel import RngStream
from core.exceptions import CodewordIndexError, NumericError, ShapeError
from core.types import Tensor

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8


# ============================================================================
# Fragmentation
# ============================================================================


def fragment_count(size: int, d: int) -> int:
    """Number of length-d fragments covering a length-size vector."""
    return math.ceil(size / d)


def fragment(update: Tensor, d: int) -> Tensor:
    """
    Split a flat update into (J, d) fragments, zero-padding the tail.

    Examples:
        >>> fragment(numkernel.as_tensor([1, 2, 3]), 2)
        tensor([[1., 2.],
                [3., 0.]], dtype=torch.float64)
    """
    if update.dim() != 1:
        raise ShapeError(f"fragment: expected a flat vector, got {tuple(update.shape)}")
    if d < 1:
        raise ShapeError(f"fragment: d must be positive, got {d}")
    slots = fragment_count(update.numel(), d)
    padded = torch.zeros(slots * d, dtype=update.dtype)
    padded[: update.numel()] = update
    return padded.reshape(slots, d)


def defragment(fragments: Tensor, size: int) -> Tensor:
    """Concatenate (J, d) fragments and strip the padding back to size."""
    flat = fragments.reshape(-1)
    if flat.numel() < size:
        raise ShapeError(f"defragment: {flat.numel()} values cannot cover size {size}")
    return flat[:size]


# ============================================================================
# Codebook types
# ============================================================================


@dataclass(frozen=True)
class CurvatureProxy:
    """
    Diagonal sensitivity estimate from the BS fragment population.

    Attributes:
        mean: (d,) per-dimension mean.
        scale: (d,) 1/sqrt(variance + epsilon), positive and finite.
        epsilon: Stabilising constant.
    """

    mean: Tensor
    scale: Tensor
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def from_fragments(cls, fragments: Tensor, epsilon: float = DEFAULT_EPSILON) -> "CurvatureProxy":
        """
        Estimate mean and inverse-std scale over the rows of (N, d) fragments.

        Raises:
            NumericError: If a dimension has zero variance and epsilon is 0.

        Examples:
            >>> proxy = CurvatureProxy.from_fragments(
            ...     numkernel.as_tensor([[0, 0], [2, 0], [0, 4], [2, 4]]), epsilon=0.0)
            >>> proxy.mean.tolist(), proxy.scale.tolist()
            ([1.0, 2.0], [1.0, 0.5])
        """
        if fragments.dim() != 2 or fragments.shape[0] == 0:
            raise ShapeError("curvature proxy needs a non-empty (N, d) fragment matrix")
        mean = fragments.mean(dim=0)
        variance = ((fragments - mean) ** 2).mean(dim=0)
        denom = variance + epsilon
        if bool((denom <= 0).any()):
            raise NumericError("curvature proxy: zero variance with epsilon=0")
        scale = 1.0 / torch.sqrt(denom)
        numkernel.ensure_finite(scale, "curvature proxy")
        return cls(mean=mean, scale=scale, epsilon=epsilon)

    def whiten(self, fragments: Tensor) -> Tensor:
        """Map fragments into the scaled space W(u - mu)."""
        return (fragments - self.mean) * self.scale

    def unwhiten(self, whitened: Tensor) -> Tensor:
        """Inverse map W^-1 q + mu."""
        return whitened / self.scale + self.mean


@dataclass(frozen=True)
class QuantCodebook:
    """
    Popularity-ordered quantisation codebook broadcast by the BS.

    Attributes:
        centroids: (d, n) matrix, column j is centroid q_j.
        popularity: (n,) simplex vector, non-increasing when ordered.
        round_index: FEEL round the codebook was built for.
        ordered: Whether popularity ordering was applied.
    """

    centroids: Tensor
    popularity: Tensor
    round_index: int = 0
    ordered: bool = True

    @property
    def d(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def n(self) -> int:
        return int(self.centroids.shape[1])

    def centroid(self, index: int) -> Tensor:
        if not 0 <= index < self.n:
            raise CodewordIndexError(f"centroid index {index} outside [0, {self.n})")
        return self.centroids[:, index]


@dataclass
class ErrorFeedbackState:
    """
    Per-device quantisation residual carried into the next round.

    Attributes:
        accumulator: (W,) residual e; identically zero when disabled.
        enabled: Whether error feedback is active for this device.
    """

    accumulator: Tensor
    enabled: bool = True

    @classmethod
    def zeros(cls, size: int, enabled: bool = True) -> "ErrorFeedbackState":
        return cls(accumulator=torch.zeros(size, dtype=numkernel.DTYPE), enabled=enabled)


# ============================================================================
# Codebook construction
# ============================================================================


def kmeans_pp_indices(points: Tensor, n: int, rng: RngStream) -> list[int]:
    """
    k-means++ seeding over the rows of points, returning chosen row indices.

    Once every remaining squared distance is zero the rest are drawn uniformly
    from the input set, so duplicates appear when n exceeds the number of
    distinct points.
    """
    count = points.shape[0]
    chosen = [numkernel.categorical(rng, torch.ones(count, dtype=numkernel.DTYPE))]
    nearest = ((points - points[chosen[0]]) ** 2).sum(dim=1)
    while len(chosen) < n:
        if float(nearest.sum()) > 0.0:
            index = numkernel.categorical(rng, nearest)
        else:
            index = numkernel.categorical(rng, torch.ones(count, dtype=numkernel.DTYPE))
        chosen.append(index)
        nearest = torch.minimum(nearest, ((points - points[index]) ** 2).sum(dim=1))
    return chosen


def build_codebook(
    bs_fragments: Tensor | Sequence[Tensor],
    n: int,
    curvature: CurvatureProxy | None,
    rng: RngStream,
    round_index: int = 0,
    ordered: bool = True,
) -> QuantCodebook:
    """
    Build the round's quantisation codebook from the BS fragments.

    Seeding runs in the whitened space when a curvature proxy is given.
    k-means++ picks input points, so mapping the chosen centroids back to the
    original space returns the original BS fragments at those indices.

    Args:
        bs_fragments: (N, d) BS fragments, or a list of (d,) fragments.
        n: Number of centroids.
        curvature: Optional diagonal sensitivity proxy.
        rng: Stream for the seeding draws.
        round_index: Round the codebook belongs to.
        ordered: Sort columns by descending popularity.

    Returns:
        QuantCodebook: Codebook with centroids and popularity.

    Raises:
        ShapeError: On empty input or n < 1.
    """
    points = _stack_fragments(bs_fragments)
    if n < 1:
        raise ShapeError(f"build_codebook: n must be positive, got {n}")
    space = curvature.whiten(points) if curvature is not None else points
    chosen = kmeans_pp_indices(space, n, rng)
    centroids = points[chosen].transpose(0, 1).contiguous()

    assignments = quantise_many(points, QuantCodebook(centroids, torch.full((n,), 1.0 / n)))
    counts = torch.bincount(assignments, minlength=n).to(numkernel.DTYPE)
    if ordered:
        # equal popularity keeps the lower input row first
        by_row = torch.argsort(torch.tensor(chosen), stable=True)
        order = by_row[torch.argsort(-counts[by_row], stable=True)]
        counts = counts[order]
        centroids = centroids[:, order].contiguous()
    popularity = counts / counts.sum()
    logger.debug(
        "Built quantisation codebook for round %d: n=%d, d=%d, distinct used=%d",
        round_index,
        n,
        points.shape[1],
        int((counts > 0).sum()),
    )
    return QuantCodebook(
        centroids=numkernel.ensure_finite(centroids, "build_codebook"),
        popularity=popularity,
        round_index=round_index,
        ordered=ordered,
    )


def _stack_fragments(fragments: Tensor | Sequence[Tensor]) -> Tensor:
    if isinstance(fragments, torch.Tensor):
        points = fragments
    else:
        if len(fragments) == 0:
            raise ShapeError("build_codebook: no BS fragments")
        points = torch.stack(list(fragments))
    if points.dim() != 2 or points.shape[0] == 0:
        raise ShapeError("build_codebook: expected a non-empty (N, d) fragment matrix")
    return points.to(numkernel.DTYPE)


# ============================================================================
# Encoding
# ============================================================================


def quantise_many(fragments: Tensor, cb: QuantCodebook) -> Tensor:
    """
    Nearest-centroid indices for the rows of (J, d) fragments.

    Ties go to the lowest index, i.e. the most popular centroid.
    """
    if fragments.dim() != 2 or fragments.shape[1] != cb.d:
        raise ShapeError(
            f"quantise: fragments {tuple(fragments.shape)} do not match d={cb.d}"
        )
    diff = fragments.unsqueeze(2) - cb.centroids.unsqueeze(0)
    distances = (diff**2).sum(dim=1)
    # argmin returns the first minimal index
    return torch.argmin(distances, dim=1)


def quantise(u: Tensor, cb: QuantCodebook) -> int:
    """
    Index of the centroid nearest to fragment u.

    Examples:
        >>> cb = QuantCodebook(numkernel.as_tensor([[0, 1], [0, 1]]), numkernel.as_tensor([0.5, 0.5]))
        >>> quantise(numkernel.as_tensor([0.9, 1.2]), cb)
        1
    """
    if u.dim() != 1:
        raise ShapeError(f"quantise: expected a (d,) fragment, got {tuple(u.shape)}")
    return int(quantise_many(u.unsqueeze(0), cb)[0])


def dequantise(indices: Tensor, cb: QuantCodebook) -> Tensor:
    """(J,) indices → (J, d) centroids."""
    if bool((indices < 0).any()) or bool((indices >= cb.n).any()):
        raise CodewordIndexError(f"dequantise: index outside [0, {cb.n})")
    return cb.centroids[:, indices].transpose(0, 1)


def quantise_update(update: Tensor, cb: QuantCodebook) -> tuple[Tensor, Tensor]:
    """
    Fragment, quantise and reconstruct a flat update.

    Returns:
        tuple: (J,) indices and the de-quantised flat update (pad stripped).
    """
    indices = quantise_many(fragment(update, cb.d), cb)
    return indices, defragment(dequantise(indices, cb), update.numel())


# ============================================================================
# Error feedback
# ============================================================================


def apply_error_feedback(update: Tensor, state: ErrorFeedbackState) -> Tensor:
    """
    Error-feedback-corrected update s = update + e.

    Examples:
        >>> state = ErrorFeedbackState.zeros(1)
        >>> s = apply_error_feedback(numkernel.as_tensor([1.0]), state)
        >>> record_residual(state, s, numkernel.as_tensor([0.8]))
        >>> apply_error_feedback(numkernel.as_tensor([1.0]), state)
        tensor([1.2000], dtype=torch.float64)
    """
    if update.shape != state.accumulator.shape:
        raise ShapeError(
            f"error feedback: update {tuple(update.shape)} vs accumulator "
            f"{tuple(state.accumulator.shape)}"
        )
    if not state.enabled:
        return update
    return update + state.accumulator


def record_residual(state: ErrorFeedbackState, s: Tensor, quantised: Tensor) -> None:
    """Set the accumulator to s - Q(s); no-op when disabled."""
    if not state.enabled:
        return
    if s.shape != state.accumulator.shape or quantised.shape != s.shape:
        raise ShapeError("error feedback: residual shapes do not match the accumulator")
    state.accumulator = s - quantised


def quantisation_residual_ratio(s: Tensor, quantised: Tensor, eps: float = 1e-12) -> float:
    """Normalised squared residual ||s - Q(s)||² / (||s||² + eps)."""
    return float(((s - quantised) ** 2).sum() / ((s**2).sum() + eps))
