"""
De-quantisation of decoded counts and symmetric aggregation rules.
Mean, trimmed mean and majority vote over the centroids a slot decoded to.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import torch

from airsum import numkernel, vq
from airsum.uracode import ActivityVector
from airsum.vq import QuantCodebook
from core.exceptions import EmptySlotError, ShapeError
from core.types import Tensor

logger = logging.getLogger(__name__)

# Guards ceil() against τ·K̂ landing a rounding error above an integer.
MASS_SLACK = 1e-9


class RuleKind(str, Enum):
    MEAN = "mean"
    TRIMMED_MEAN = "trimmed_mean"
    MAJORITY = "majority"


@dataclass(frozen=True)
class AggregationRule:
    """
    Symmetric aggregation rule g(·).

    Attributes:
        kind: Rule family.
        tau: Retained mass fraction for trimmed_mean, in (0, 1].

    Examples:
        >>> AggregationRule.parse("trimmed_mean:0.8")
        AggregationRule(kind=<RuleKind.TRIMMED_MEAN: 'trimmed_mean'>, tau=0.8)
        >>> str(AggregationRule.parse("majority"))
        'majority'
    """

    kind: RuleKind
    tau: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"trimmed_mean tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def parse(cls, text: str) -> "AggregationRule":
        """
        Parse "mean", "majority" or "trimmed_mean:<tau>".

        Raises:
            ValueError: On an unknown rule or a malformed tau.
        """
        name, _, argument = text.strip().partition(":")
        kind = RuleKind(name)
        if kind is RuleKind.TRIMMED_MEAN:
            if not argument:
                raise ValueError("trimmed_mean needs a retained fraction, e.g. trimmed_mean:0.8")
            return cls(kind, float(argument))
        if argument:
            raise ValueError(f"rule {name!r} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind is RuleKind.TRIMMED_MEAN:
            return f"{self.kind.value}:{self.tau:g}"
        return self.kind.value


def _counts(x: ActivityVector | Tensor) -> Tensor:
    return x.counts if isinstance(x, ActivityVector) else x.to(torch.int64)


def _weighted_centroid(weights: Tensor, cb: QuantCodebook, denominator: float) -> Tensor:
    return numkernel.matvec(cb.centroids, weights.to(numkernel.DTYPE)) / denominator


def mean_fragment(x: ActivityVector | Tensor, cb: QuantCodebook, ka_hat: float) -> Tensor:
    """
    Arithmetic-mean reconstruction (1/K̂) Σⱼ xⱼ qⱼ.

    A non-positive K̂ yields a zero fragment and a warning.
    """
    if ka_hat <= 0:
        logger.warning("Mean rule received K̂=%s; using a zero fragment", ka_hat)
        return torch.zeros(cb.d, dtype=numkernel.DTYPE)
    return _weighted_centroid(_counts(x), cb, float(ka_hat))


def majority_fragment(x: ActivityVector | Tensor, cb: QuantCodebook) -> Tensor:
    """
    Centroid with the most votes; tied winners are averaged.

    Raises:
        EmptySlotError: If every count is zero.
    """
    counts = _counts(x)
    if int(counts.sum()) == 0:
        raise EmptySlotError("majority: all-zero activity vector")
    tied = counts == counts.max()
    return _weighted_centroid(tied, cb, float(tied.sum()))


def trimmed_weights(counts: Tensor, mass: int) -> Tensor:
    """
    Per-codeword weights retaining the most common codewords up to mass M.

    Equal-count groups are taken whole while they fit; the group that crosses
    M shares the remaining mass evenly (a single index takes it
    fractionally). When Σx < M every count is kept.
    """
    weights = torch.zeros(counts.shape, dtype=numkernel.DTYPE)
    remaining = float(mass)
    for value in torch.unique(counts[counts > 0]).flip(0).tolist():
        group = torch.nonzero(counts == value).reshape(-1)
        group_mass = float(value * group.numel())
        if group_mass <= remaining:
            weights[group] = float(value)
            remaining -= group_mass
        else:
            weights[group] = remaining / group.numel()
            remaining = 0.0
        if remaining == 0.0:
            break
    return weights


def trimmed_fragment(
    x: ActivityVector | Tensor, cb: QuantCodebook, ka_hat: float, tau: float
) -> Tensor:
    """
    Trimmed-mean reconstruction (Σ wⱼqⱼ)/M with M = ceil(τ·K̂).

    τ = 1 retains everything and reduces to the mean rule.

    Raises:
        EmptySlotError: All-zero counts or M = 0.
    """
    counts = _counts(x)
    if int(counts.sum()) == 0:
        raise EmptySlotError("trimmed_mean: all-zero activity vector")
    if tau >= 1.0:
        return mean_fragment(counts, cb, ka_hat)
    mass = math.ceil(tau * ka_hat - MASS_SLACK)
    if mass <= 0:
        raise EmptySlotError(f"trimmed_mean: retained mass M={mass} for K̂={ka_hat}")
    return _weighted_centroid(trimmed_weights(counts, mass), cb, float(mass))


def slot_fragment(
    x: ActivityVector | Tensor, cb: QuantCodebook, rule: AggregationRule, ka_hat: float
) -> Tensor:
    """Fragment estimate for one slot under rule."""
    if rule.kind is RuleKind.MEAN:
        return mean_fragment(x, cb, ka_hat)
    if rule.kind is RuleKind.MAJORITY:
        return majority_fragment(x, cb)
    return trimmed_fragment(x, cb, ka_hat, rule.tau)


def round_ka(ka_hats: Tensor | Sequence[float]) -> float:
    """Round-averaged K̂ₐ across fragments, rounded once (half up)."""
    values = torch.as_tensor(ka_hats, dtype=numkernel.DTYPE)
    return float(math.floor(float(values.mean()) + 0.5))


def aggregate_round(
    slot_counts: Tensor | Sequence[ActivityVector],
    cb: QuantCodebook,
    rule: AggregationRule,
    ka_hat_round: float,
    size: int,
) -> Tensor:
    """
    Aggregate every slot of a round into a length-size update.

    Args:
        slot_counts: (J, n) counts or J activity vectors.
        cb: The round's quantisation codebook.
        rule: Aggregation rule.
        ka_hat_round: Round-level K̂ (see round_ka).
        size: Model dimension W.

    Returns:
        Tensor: (size,) aggregate g.

    Raises:
        ShapeError: If the slot count is not ceil(size / d).
    """
    rows = (
        slot_counts
        if isinstance(slot_counts, torch.Tensor)
        else torch.stack([_counts(x) for x in slot_counts])
    )
    expected = vq.fragment_count(size, cb.d)
    if rows.shape[0] != expected:
        raise ShapeError(f"aggregate_round: {rows.shape[0]} slots, expected {expected}")
    fragments = []
    empty = 0
    for counts in rows:
        try:
            fragments.append(slot_fragment(counts, cb, rule, ka_hat_round))
        except EmptySlotError:
            empty += 1
            fragments.append(torch.zeros(cb.d, dtype=numkernel.DTYPE))
    if empty:
        logger.warning(
            "%d of %d slots decoded empty under %s; zero fragments used", empty, expected, rule
        )
    return vq.defragment(torch.stack(fragments), size)
