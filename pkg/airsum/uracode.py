"""
Shared URA codebook and activity vectors.

Codewords are the rows of C_syn = D W (n × l); the sensing matrix used by the
channel and the decoder is C = C_synᵀ (l × n), whose columns are the codewords.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from airsum import numkernel
from airsum.numkernel import RngStream
from core.exceptions import CodewordIndexError, NumericError, ShapeError
from core.types import Tensor

logger = logging.getLogger(__name__)

ROW_NORM_TOLERANCE = 1e-9


class CodebookMode(str, Enum):
    """How the URA codebook is parameterised and whether it trains."""

    LEARNED = "learned"
    LEARNED_SINGLE = "learned_single"
    FIXED_GAUSSIAN = "fixed_gaussian"
    FIXED_BERNOULLI = "fixed_bernoulli"

    @property
    def trainable(self) -> bool:
        return self in (CodebookMode.LEARNED, CodebookMode.LEARNED_SINGLE)


@dataclass(frozen=True)
class ActivityVector:
    """
    Per-codeword device counts for one fragment slot.

    Attributes:
        counts: (n,) non-negative int64 counts summing to K_a.
    """

    counts: Tensor

    @property
    def ka(self) -> int:
        return int(self.counts.sum())

    @property
    def n(self) -> int:
        return int(self.counts.numel())

    def as_float(self) -> Tensor:
        return self.counts.to(numkernel.DTYPE)


class UraCodebook(nn.Module):
    """
    Two-matrix URA codebook C_syn = D W with unit-norm rows.

    Attributes:
        D: (n, l) base matrix.
        W: (l, l) transform, identity at initialisation.
        mode: Parameterisation and training mode.

    Examples:
        >>> cb = init_codebook(8, 4, CodebookMode.FIXED_GAUSSIAN, RngStream(1))
        >>> cb.sensing_matrix().shape
        torch.Size([4, 8])
    """

    def __init__(self, D: Tensor, W: Tensor, mode: CodebookMode) -> None:
        super().__init__()
        if D.dim() != 2 or W.dim() != 2 or W.shape != (D.shape[1], D.shape[1]):
            raise ShapeError(f"URA codebook: D {tuple(D.shape)} and W {tuple(W.shape)} mismatch")
        self.mode = mode
        self.D = nn.Parameter(D.to(numkernel.DTYPE), requires_grad=mode.trainable)
        self.W = nn.Parameter(
            W.to(numkernel.DTYPE), requires_grad=mode is CodebookMode.LEARNED
        )

    @property
    def n(self) -> int:
        return int(self.D.shape[0])

    @property
    def l(self) -> int:  # noqa: E743
        return int(self.D.shape[1])

    def synthesis(self) -> Tensor:
        """(n, l) codeword rows D W."""
        return self.D @ self.W

    def sensing_matrix(self) -> Tensor:
        """(l, n) matrix C whose columns are the codewords."""
        return self.synthesis().transpose(0, 1)

    def row_norm_error(self) -> float:
        """max |‖row‖ − 1| over the rows of D W."""
        with torch.no_grad():
            return float((self.synthesis().norm(dim=1) - 1.0).abs().max())


def init_codebook(n: int, l: int, mode: CodebookMode | str, rng: RngStream) -> UraCodebook:  # noqa: E741
    """
    Fresh URA codebook: Gaussian (or ±1 Bernoulli) D, identity W, unit rows.

    Raises:
        ShapeError: If n or l is not positive.
        ValueError: If mode is not a CodebookMode value.
    """
    if n < 1 or l < 1:
        raise ShapeError(f"init_codebook: n and l must be positive, got n={n}, l={l}")
    mode = CodebookMode(mode)
    if mode is CodebookMode.FIXED_BERNOULLI:
        D = torch.where(numkernel.uniform(rng, (n, l)) < 0.5, -1.0, 1.0).to(numkernel.DTYPE)
    else:
        D = numkernel.gauss(rng, (n, l))
    codebook = UraCodebook(D, torch.eye(l, dtype=numkernel.DTYPE), mode)
    return renormalise(codebook)


def renormalise(cb: UraCodebook) -> UraCodebook:
    """
    Rescale rows of D so every row of D W has unit norm (in place).

    Raises:
        NumericError: If a row of D W is zero.
    """
    with torch.no_grad():
        norms = cb.synthesis().norm(dim=1)
        if bool((norms == 0).any()):
            raise NumericError("renormalise: zero codeword row")
        cb.D.div_(norms.unsqueeze(1))
    return cb


def orthogonality_penalty(cb: UraCodebook) -> Tensor:
    """Squared Frobenius norm of WᵀW − I."""
    eye = torch.eye(cb.l, dtype=numkernel.DTYPE)
    gram = cb.W.transpose(0, 1) @ cb.W
    return ((gram - eye) ** 2).sum()


def encode_slot(indices: Sequence[int] | Tensor, n: int) -> ActivityVector:
    """
    Count how many devices chose each codeword.

    Examples:
        >>> encode_slot([3, 3, 7], 8).counts.tolist()
        [0, 0, 0, 2, 0, 0, 0, 1]

    Raises:
        CodewordIndexError: If an index lies outside [0, n).
    """
    chosen = torch.as_tensor(indices, dtype=torch.int64).reshape(-1)
    if bool((chosen < 0).any()) or bool((chosen >= n).any()):
        raise CodewordIndexError(f"encode_slot: index outside [0, {n})")
    return ActivityVector(torch.bincount(chosen, minlength=n))


def encode_slots(indices: Tensor, n: int) -> Tensor:
    """
    Ground-truth counts for every slot of a round.

    Args:
        indices: (K, J) quantiser indices, one row per device.
        n: Codebook size.

    Returns:
        Tensor: (J, n) int64 counts.
    """
    if indices.dim() != 2:
        raise ShapeError(f"encode_slots: expected (K, J) indices, got {tuple(indices.shape)}")
    slots = indices.shape[1]
    counts = torch.zeros((slots, n), dtype=torch.int64)
    for slot in range(slots):
        counts[slot] = encode_slot(indices[:, slot], n).counts
    return counts


def transmit(x: ActivityVector | Tensor, cb: UraCodebook) -> Tensor:
    """Noiseless superposition C x (length l)."""
    counts = x.as_float() if isinstance(x, ActivityVector) else x.to(numkernel.DTYPE)
    if counts.shape[-1] != cb.n:
        raise ShapeError(f"transmit: {counts.shape[-1]} counts for a codebook of {cb.n}")
    return numkernel.matvec(cb.sensing_matrix(), counts)


def transmit_batch(counts: Tensor, C: Tensor) -> Tensor:
    """(B, n) counts through an explicit sensing matrix → (B, l) signals."""
    return numkernel.matvec(C, counts.to(numkernel.DTYPE))
