"""
Dense float64 numerics, seeded random streams and the gradient tape.

Tensors are torch float64 CPU tensors. Reverse-mode gradients come from
torch autograd; GradTape records which leaves are trainable and hands back one
gradient per leaf.
"""

import hashlib
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from core.exceptions import NumericError, ShapeError, TapeError
from core.types import Shape, Tensor, TensorMap

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def as_tensor(data: object, *, requires_grad: bool = False) -> Tensor:
    """
    Convert data to a float64 tensor.

    Args:
        data: Nested sequence, scalar, numpy array or tensor.
        requires_grad: Mark the result as an autograd leaf.

    Returns:
        Tensor: A float64 tensor (a copy when the input was already a tensor).

    Raises:
        NumericError: If any value is NaN or infinite.
    """
    if isinstance(data, torch.Tensor):
        tensor = data.detach().to(DTYPE).clone()
    else:
        tensor = torch.as_tensor(data, dtype=DTYPE).clone()
    ensure_finite(tensor, "as_tensor")
    if requires_grad:
        tensor.requires_grad_(True)
    return tensor


def ensure_finite(tensor: Tensor, what: str) -> Tensor:
    """Raise NumericError when tensor holds NaN or Inf; return it unchanged."""
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError(f"{what}: non-finite values in result")
    return tensor


def matvec(matrix: Tensor, vector: Tensor) -> Tensor:
    """
    Matrix-vector product with optional leading batch dimensions.

    Args:
        matrix: (m, n) matrix.
        vector: (..., n) vector or batch of vectors.

    Returns:
        Tensor: (..., m) product.

    Raises:
        ShapeError: If the inner extents do not match.

    Examples:
        >>> matvec(as_tensor([[1, 2], [3, 4]]), as_tensor([1, 1]))
        tensor([3., 7.], dtype=torch.float64)
    """
    if matrix.dim() != 2:
        raise ShapeError(f"matvec: expected a matrix, got shape {tuple(matrix.shape)}")
    if vector.dim() < 1 or vector.shape[-1] != matrix.shape[1]:
        raise ShapeError(
            f"matvec: inner extents differ, {tuple(matrix.shape)} x {tuple(vector.shape)}"
        )
    return ensure_finite(vector @ matrix.transpose(0, 1), "matvec")


def conv1d(
    signal: Tensor,
    kernels: Tensor,
    same_padding: bool = True,
    bias: Tensor | None = None,
) -> Tensor:
    """
    1-D cross-correlation with zero padding.

    Args:
        signal: (channels, length) or (batch, channels, length).
        kernels: (out, in, k) kernel stack.
        same_padding: Pad so the output length equals the input length.
        bias: Optional (out,) bias.

    Returns:
        Tensor: (out, length) or (batch, out, length).

    Raises:
        ShapeError: On channel mismatch or an even kernel with same padding.
    """
    if kernels.dim() != 3:
        raise ShapeError(f"conv1d: kernels must be (out, in, k), got {tuple(kernels.shape)}")
    batched = signal.dim() == 3
    if not batched and signal.dim() != 2:
        raise ShapeError(f"conv1d: signal must be 2-D or 3-D, got {tuple(signal.shape)}")
    channels = signal.shape[-2]
    if channels != kernels.shape[1]:
        raise ShapeError(
            f"conv1d: signal has {channels} channels, kernels expect {kernels.shape[1]}"
        )
    width = kernels.shape[2]
    if same_padding and width % 2 == 0:
        raise ShapeError(f"conv1d: same padding needs an odd kernel, got k={width}")
    padding = width // 2 if same_padding else 0
    batch = signal if batched else signal.unsqueeze(0)
    out = F.conv1d(batch, kernels, bias, padding=padding)
    return ensure_finite(out if batched else out.squeeze(0), "conv1d")


# ============================================================================
# Gradient tape
# ============================================================================


@dataclass
class GradTape:
    """
    Records trainable leaves and replays autograd to a name→gradient map.

    The graph itself is built by torch as operations run; the tape owns the
    set of watched leaves. A tape belongs to one thread.

    Examples:
        >>> tape = GradTape()
        >>> x = tape.watch("x", as_tensor(3.0))
        >>> backward(tape, x * x)["x"]
        tensor(6., dtype=torch.float64)
    """

    leaves: TensorMap = field(default_factory=dict)

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        """Register tensor as a trainable leaf and return it."""
        if tensor.grad_fn is not None:
            raise TapeError(f"{name}: only leaf tensors can be watched")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.leaves[name] = tensor
        return tensor

    def watch_all(self, named: Iterable[tuple[str, Tensor]]) -> "GradTape":
        """Watch every (name, tensor) pair that requires grad."""
        for name, tensor in named:
            if tensor.requires_grad:
                self.watch(name, tensor)
        return self


def backward(tape: GradTape, loss: Tensor) -> TensorMap:
    """
    Gradients of a scalar loss with respect to every watched leaf.

    The graph is retained so the same loss can be replayed.

    Raises:
        ShapeError: If loss is not a scalar.
        TapeError: If loss does not depend on any watched leaf.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not tape.leaves or loss.grad_fn is None:
        raise TapeError("backward: loss is not on the tape")
    names = list(tape.leaves)
    grads = torch.autograd.grad(
        loss.reshape(()),
        [tape.leaves[name] for name in names],
        retain_graph=True,
        allow_unused=True,
    )
    if all(grad is None for grad in grads):
        raise TapeError("backward: loss does not depend on any watched leaf")
    result: TensorMap = {}
    for name, grad in zip(names, grads):
        leaf = tape.leaves[name]
        result[name] = torch.zeros_like(leaf) if grad is None else grad.detach()
        ensure_finite(result[name], f"backward[{name}]")
    return result


# ============================================================================
# Random streams
# ============================================================================


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


@dataclass
class RngStream:
    """
    A labelled random stream: identical (seed, label) gives identical draws.

    Streams are split by label rather than shared, so concurrent consumers
    never interleave draws.
    """

    seed: int
    label: str = "root"
    generator: torch.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.generator = torch.Generator().manual_seed(_derive_seed(self.seed, self.label))

    def split(self, label: str) -> "RngStream":
        """Child stream whose draws are independent of this one's position."""
        return RngStream(self.seed, f"{self.label}/{label}")


def gauss(rng: RngStream, shape: Shape | Sequence[int]) -> Tensor:
    """Standard normal float64 tensor."""
    return torch.randn(tuple(shape), generator=rng.generator, dtype=DTYPE)


def uniform(rng: RngStream, shape: Shape | Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
    """Uniform float64 tensor on [low, high)."""
    draws = torch.rand(tuple(shape), generator=rng.generator, dtype=DTYPE)
    return low + (high - low) * draws


def integers(rng: RngStream, low: int, high: int) -> int:
    """Uniform integer on [low, high] inclusive."""
    if high < low:
        raise NumericError(f"integers: empty range [{low}, {high}]")
    return int(torch.randint(low, high + 1, (1,), generator=rng.generator).item())


def permutation(rng: RngStream, size: int) -> Tensor:
    """Random permutation of range(size) as an int64 tensor."""
    return torch.randperm(size, generator=rng.generator)


def categorical(rng: RngStream, weights: Tensor | Sequence[float]) -> int:
    """
    Index drawn with probability proportional to weight.

    Raises:
        NumericError: If a weight is negative or non-finite, or all are zero.

    Examples:
        >>> categorical(RngStream(0), [0.0, 1.0, 0.0])
        1
    """
    probs = torch.as_tensor(weights, dtype=DTYPE)
    if probs.dim() != 1 or probs.numel() == 0:
        raise NumericError("categorical: weights must be a non-empty vector")
    if not bool(torch.isfinite(probs).all()) or bool((probs < 0).any()):
        raise NumericError("categorical: weights must be finite and non-negative")
    if float(probs.sum()) <= 0.0:
        raise NumericError("categorical: weights are all zero")
    return int(torch.multinomial(probs, 1, generator=rng.generator).item())
