"""
Unrolled AMP-style decoder for activity-count recovery.

Each layer runs an output block (measurement domain), an input block
(codeword domain: tempered Poisson spike-and-slab posterior plus a small CNN
refinement) and damped EM updates of the Poisson rates, activity
probabilities and noise variance. The fixed mode freezes the per-layer
scalars at their defaults and bypasses the CNN, giving the classical
hand-tuned baseline.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import torch
from torch import nn

from airsum import numkernel
from airsum.numkernel import RngStream
from airsum.uracode import ActivityVector
from config import settings
from core.exceptions import NumericError, ShapeError
from core.types import Tensor

logger = logging.getLogger(__name__)

GAMMA_RANGE = (0.3, 2.0)
BETA_RANGE = (0.5, 2.0)
ZETA_INIT = 0.85
RHO_BOUNDS = (0.05, 0.95)

NU_FLOOR = 1e-8
LAMBDA_MIN = 1e-6
SIGMA2_MIN = 1e-8
STANDARDISE_EPS = 1e-8

FEATURE_CHANNELS = 6
MEAN_CHANNEL = 2


class DecoderMode(str, Enum):
    LEARNED = "learned"
    FIXED = "fixed"


@dataclass(frozen=True)
class DecoderConfig:
    """
    Shape and prior settings of the decoder.

    Attributes:
        n: Codebook size.
        l: Codeword length.
        layers: Unrolled layer count L.
        prior_ka_mean: Prior mean of active devices per slot.
        x_max: Posterior support truncation; None picks max(32, 3·prior).
        filters: CNN hidden channels.
        kernel: CNN kernel width (odd).
    """

    n: int
    l: int  # noqa: E741
    layers: int
    prior_ka_mean: float
    x_max: int | None = None
    filters: int = 32
    kernel: int = 3

    def __post_init__(self) -> None:
        if self.n < 1 or self.l < 1:
            raise ShapeError(f"decoder: n and l must be positive, got n={self.n}, l={self.l}")
        if self.layers < 1:
            raise ShapeError(f"decoder: at least one layer required, got {self.layers}")
        if self.prior_ka_mean <= 0:
            raise ShapeError(f"decoder: prior_ka_mean must be positive, got {self.prior_ka_mean}")
        if self.kernel % 2 == 0:
            raise ShapeError(f"decoder: kernel width must be odd, got {self.kernel}")

    @property
    def support_max(self) -> int:
        if self.x_max is not None:
            return self.x_max
        return max(32, math.ceil(3 * self.prior_ka_mean))


# ============================================================================
# Per-layer scalars
# ============================================================================


@dataclass(frozen=True)
class LayerScalars:
    """Mapped per-layer scalars (0-dim tensors)."""

    gamma: Tensor
    eta: Tensor
    beta: Tensor
    tau: Tensor
    zeta: Tensor
    gate_alpha: Tensor
    gate_sigma: Tensor


def _scalar(value: float) -> Tensor:
    return torch.tensor(value, dtype=numkernel.DTYPE)


FIXED_SCALARS = LayerScalars(
    gamma=_scalar(1.0),
    eta=_scalar(0.5),
    beta=_scalar(1.0),
    tau=_scalar(1.0),
    zeta=_scalar(0.0),
    gate_alpha=_scalar(0.5),
    gate_sigma=_scalar(0.5),
)


def centred_tanh(raw: Tensor, low: float, high: float) -> Tensor:
    """Map any real raw value into [low, high]."""
    return low + (high - low) * (torch.tanh(raw) + 1.0) / 2.0


def inverse_centred_tanh(value: float, low: float, high: float) -> float:
    return math.atanh(2.0 * (value - low) / (high - low) - 1.0)


def inverse_softplus(value: float) -> float:
    return math.log(math.expm1(value))


def logit(value: float) -> float:
    return math.log(value / (1.0 - value))


class Denoiser(nn.Module):
    """
    conv(6→F) → ReLU → conv(F→F) → ReLU → conv(F→1), same padding.

    Filter 0 of every layer starts as a centre-tap pass-through of the
    Bayesian mean channel and the last convolution reads only that path, so
    an untrained denoiser returns the (non-negative) posterior mean.
    """

    def __init__(self, filters: int, kernel: int, rng: RngStream) -> None:
        super().__init__()
        self.w1, self.b1 = self._layer(FEATURE_CHANNELS, filters, kernel, rng.split("conv1"))
        self.w2, self.b2 = self._layer(filters, filters, kernel, rng.split("conv2"))
        self.w3 = nn.Parameter(torch.zeros(1, filters, kernel, dtype=numkernel.DTYPE))
        self.b3 = nn.Parameter(torch.zeros(1, dtype=numkernel.DTYPE))
        centre = kernel // 2
        with torch.no_grad():
            for weight, bias, source in ((self.w1, self.b1, MEAN_CHANNEL), (self.w2, self.b2, 0)):
                weight[0].zero_()
                weight[0, source, centre] = 1.0
                bias[0] = 0.0
            self.w3[0, 0, centre] = 1.0

    @staticmethod
    def _layer(
        in_channels: int, out_channels: int, kernel: int, rng: RngStream
    ) -> tuple[nn.Parameter, nn.Parameter]:
        bound = 1.0 / math.sqrt(in_channels * kernel)
        weight = numkernel.uniform(rng, (out_channels, in_channels, kernel), -bound, bound)
        bias = numkernel.uniform(rng, (out_channels,), -bound, bound)
        return nn.Parameter(weight), nn.Parameter(bias)

    def forward(self, features: Tensor) -> Tensor:
        hidden = torch.relu(numkernel.conv1d(features, self.w1, bias=self.b1))
        hidden = torch.relu(numkernel.conv1d(hidden, self.w2, bias=self.b2))
        return numkernel.conv1d(hidden, self.w3, bias=self.b3).squeeze(-2)


class DecoderParams(nn.Module):
    """
    Learnable decoder parameters: raw per-layer scalars and CNN denoisers.

    Raw scalars are unconstrained; layer_scalars maps them into their ranges
    (γ ∈ [0.3, 2], η ∈ (0, 1), β ∈ [0.5, 2], τ > 0, ζ ∈ [0, 1], gates in
    (0, 1)). Initial raw values map to the fixed-mode defaults, except ζ which
    starts at 0.85.
    """

    def __init__(
        self,
        config: DecoderConfig,
        mode: DecoderMode | str = DecoderMode.LEARNED,
        rng: RngStream | None = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.mode = DecoderMode(mode)
        rng = rng or RngStream(0, "decoder")
        layers = config.layers

        def full(value: float) -> nn.Parameter:
            return nn.Parameter(torch.full((layers,), value, dtype=numkernel.DTYPE))

        self.raw_gamma = full(inverse_centred_tanh(1.0, *GAMMA_RANGE))
        self.raw_eta = full(0.0)
        self.raw_beta = full(inverse_centred_tanh(1.0, *BETA_RANGE))
        self.raw_tau = full(inverse_softplus(1.0))
        self.raw_zeta = full(logit(ZETA_INIT))
        self.raw_gate_alpha = full(0.0)
        self.raw_gate_sigma = full(0.0)
        self.denoisers = nn.ModuleList(
            Denoiser(config.filters, config.kernel, rng.split(f"denoiser{layer}"))
            for layer in range(layers)
        )
        if self.mode is DecoderMode.FIXED:
            self.requires_grad_(False)

    def layer_scalars(self, layer: int) -> LayerScalars:
        """Mapped scalars of one layer."""
        return LayerScalars(
            gamma=centred_tanh(self.raw_gamma[layer], *GAMMA_RANGE),
            eta=torch.sigmoid(self.raw_eta[layer]),
            beta=centred_tanh(self.raw_beta[layer], *BETA_RANGE),
            tau=nn.functional.softplus(self.raw_tau[layer]),
            zeta=torch.sigmoid(self.raw_zeta[layer]),
            gate_alpha=torch.sigmoid(self.raw_gate_alpha[layer]),
            gate_sigma=torch.sigmoid(self.raw_gate_sigma[layer]),
        )


# ============================================================================
# State
# ============================================================================


@dataclass(frozen=True)
class DecoderState:
    """
    Per-slot iterates, batched over B slots.

    Attributes:
        y: (B, l) received signal.
        x_hat, nu: (B, n) codeword-domain estimate and variance.
        z, v, r: (B, l) measurement-domain estimate, variance and residual.
        lam, alpha, pi: (B, n) Poisson rates, activity probabilities, popularity.
        sigma2, ka_hat: (B,) noise variance and active-device estimate.
    """

    y: Tensor
    x_hat: Tensor
    nu: Tensor
    z: Tensor
    v: Tensor
    r: Tensor
    lam: Tensor
    alpha: Tensor
    pi: Tensor
    sigma2: Tensor
    ka_hat: Tensor


class PosteriorMoments(NamedTuple):
    """Moments of the tempered posterior; underflow flags degenerate coordinates."""

    mean: Tensor
    variance: Tensor
    p_active: Tensor
    underflow: Tensor


@dataclass(frozen=True)
class LayerDiagnostics:
    layer: int
    residual_norm: float
    ka_hat: float
    sigma2: float
    underflow: int


@dataclass(frozen=True)
class DecodeResult:
    """
    Attributes:
        x_real: Real-valued activity estimate, (n,) or (B, n).
        ka_hat: Pre-rounding active-device estimate, scalar or (B,).
        diagnostics: One record per layer.
        state: Final decoder state.
    """

    x_real: Tensor
    ka_hat: Tensor
    diagnostics: list[LayerDiagnostics] = field(default_factory=list)
    state: DecoderState | None = None


def init_state(y: Tensor, prior_ka_mean: float, n: int) -> DecoderState:
    """
    Fresh state for every slot: x̂=0, ν=1, z=y, v=1, λ=prior/n, α=1−e^−λ.

    σ² starts at max(mean(y²) − prior/l, σ²_min).
    """
    batch = y if y.dim() == 2 else y.unsqueeze(0)
    slots, l = batch.shape  # noqa: E741
    lam = torch.full((slots, n), prior_ka_mean / n, dtype=numkernel.DTYPE)
    sigma2 = torch.clamp_min((batch**2).mean(dim=1) - prior_ka_mean / l, SIGMA2_MIN)
    return DecoderState(
        y=batch,
        x_hat=torch.zeros((slots, n), dtype=numkernel.DTYPE),
        nu=torch.ones((slots, n), dtype=numkernel.DTYPE),
        z=batch,
        v=torch.ones((slots, l), dtype=numkernel.DTYPE),
        r=torch.zeros((slots, l), dtype=numkernel.DTYPE),
        lam=lam,
        alpha=-torch.expm1(-lam),
        pi=lam / lam.sum(dim=1, keepdim=True),
        sigma2=sigma2.detach(),
        ka_hat=lam.sum(dim=1),
    )


# ============================================================================
# Blocks
# ============================================================================


def output_block(state: DecoderState, C: Tensor, scalars: LayerScalars) -> DecoderState:
    """Measurement-domain update of (z, v, r) with damping η and gain γ."""
    z_tmp = numkernel.matvec(C, state.x_hat)
    v_new = numkernel.matvec(C**2, state.nu)
    d = state.sigma2.unsqueeze(1) + state.v
    z_tilde = z_tmp - scalars.gamma * (state.r * (v_new / d))
    z = scalars.eta * state.z + (1.0 - scalars.eta) * z_tilde
    v = scalars.eta * state.v + (1.0 - scalars.eta) * v_new
    return replace(state, z=z, v=v, r=state.y - z)


def posterior_moments(
    R: Tensor | float,
    V: Tensor | float,
    alpha: Tensor | float,
    lam: Tensor | float,
    tau: Tensor | float,
    x_max: int,
) -> PosteriorMoments:
    """
    Moments of the tempered spike-and-slab Poisson posterior.

    Over x ∈ {0..x_max}: P(0) = (1−α) + α e^−λ, P(k≥1) = α λᵏ e^−λ / k!;
    weights ∝ exp([log P(x) − (R−x)²/(2V)] / τ). τ = 1 is exact Bayes.
    Slots whose weights all underflow get (0, ν_floor, 0) and are flagged.
    """
    R, V, alpha, lam, tau = (
        torch.as_tensor(value, dtype=numkernel.DTYPE) for value in (R, V, alpha, lam, tau)
    )
    support = torch.arange(x_max + 1, dtype=numkernel.DTYPE)
    R_, V_, alpha_, lam_ = (value.unsqueeze(-1) for value in (R, V, alpha, lam))
    log_slab = (
        torch.log(alpha_)
        + support[1:] * torch.log(lam_)
        - lam_
        - torch.lgamma(support[1:] + 1.0)
    )
    log_spike = torch.log1p(alpha_ * torch.expm1(-lam_))
    log_prior = torch.cat(
        [log_spike.expand(*log_slab.shape[:-1], 1), log_slab], dim=-1
    )
    log_likelihood = -((R_ - support) ** 2) / (2.0 * V_)
    logits = (log_prior + log_likelihood) / (tau.unsqueeze(-1) if tau.dim() else tau)
    normaliser = torch.logsumexp(logits, dim=-1, keepdim=True)
    weights = torch.exp(logits - normaliser)
    mean = (weights * support).sum(dim=-1)
    variance = (weights * (support - mean.unsqueeze(-1)) ** 2).sum(dim=-1)
    p_active = weights[..., 1:].sum(dim=-1)

    underflow = ~torch.isfinite(normaliser.squeeze(-1))
    if bool(underflow.any()):
        logger.debug("Posterior weights underflowed for %d coordinates", int(underflow.sum()))
        mean = torch.where(underflow, torch.zeros_like(mean), mean)
        variance = torch.where(underflow, torch.full_like(variance, NU_FLOOR), variance)
        p_active = torch.where(underflow, torch.zeros_like(p_active), p_active)
    return PosteriorMoments(mean, variance, p_active, underflow)


def standardise_log_rates(lam: Tensor) -> Tensor:
    """(log λ − mean) / (std + ε) across codewords; zero for constant λ."""
    log_lam = torch.log(lam)
    centred = log_lam - log_lam.mean(dim=-1, keepdim=True)
    var = (centred**2).mean(dim=-1, keepdim=True)
    # zero-variance rows keep a finite gradient through sqrt
    spread = var > 0
    std = torch.where(spread, torch.sqrt(torch.where(spread, var, torch.ones_like(var))), torch.zeros_like(var))
    return centred / (std + STANDARDISE_EPS)


def input_block(
    state: DecoderState,
    C: Tensor,
    scalars: LayerScalars,
    x_max: int,
    denoiser: Denoiser | None = None,
) -> tuple[DecoderState, PosteriorMoments, Tensor]:
    """
    Codeword-domain denoising.

    Forms the pseudo-channel R = x̂ + ρ/ψ with variance 1/ψ from the
    post-output-block d and r, evaluates the posterior, then blends the
    CNN refinement with the Bayesian mean through ζ. Without a denoiser
    x̂ becomes the Bayesian mean.

    Returns:
        tuple: Updated state, posterior moments, (B, 6, n) feature map.
    """
    d = state.sigma2.unsqueeze(1) + state.v
    kappa = scalars.beta / d
    psi = numkernel.matvec((C**2).transpose(0, 1), kappa)
    if bool((psi <= 0).any()):
        raise NumericError("input block: non-positive pseudo-channel precision")
    V = 1.0 / psi
    rho = numkernel.matvec(C.transpose(0, 1), kappa * state.r)
    R = state.x_hat + rho / psi

    posterior = posterior_moments(R, V, state.alpha, state.lam, scalars.tau, x_max)
    nu = torch.clamp_min(posterior.variance, NU_FLOOR)
    features = torch.stack(
        [
            R,
            torch.sqrt(V),
            posterior.mean,
            torch.sqrt(nu),
            state.alpha,
            standardise_log_rates(state.lam),
        ],
        dim=1,
    )
    if denoiser is None:
        x_hat = posterior.mean
    else:
        x_tilde = denoiser(features)
        x_hat = (1.0 - scalars.zeta) * posterior.mean + scalars.zeta * x_tilde
    return replace(state, x_hat=x_hat, nu=nu), posterior, features


def em_update(
    state: DecoderState,
    posterior: PosteriorMoments,
    scalars: LayerScalars,
    *,
    pool: bool = False,
    step: float | None = None,
) -> DecoderState:
    """
    Damped EM refresh of λ, α, σ², K̂ₐ and π.

    Args:
        state: State after the input block.
        posterior: Posterior moments from the input block.
        scalars: Layer scalars (g_α and s_σ are used).
        pool: Average posterior statistics over the batch (training blocks
            share one activity level); otherwise each slot uses its own.
        step: Force the log-domain step ρ_λ instead of deriving it from the
            posterior confidence.
    """
    mean, variance, p_active = posterior.mean, posterior.variance, posterior.p_active
    if pool:
        mean, variance, p_active = (
            stat.mean(dim=0, keepdim=True).expand_as(stat)
            for stat in (mean, variance, p_active)
        )
    lam_hat = torch.clamp_min(mean, LAMBDA_MIN)
    if step is None:
        confidence = (mean**2 / torch.clamp_min(variance, NU_FLOOR)).mean(dim=1, keepdim=True)
        rho = torch.clamp(confidence / (1.0 + confidence), *RHO_BOUNDS)
    else:
        rho = torch.as_tensor(step, dtype=numkernel.DTYPE)
    log_lam = torch.log(state.lam)
    lam = torch.exp(log_lam + rho * (torch.log(lam_hat) - log_lam))
    ka_hat = lam.sum(dim=1)
    alpha = scalars.gate_alpha * p_active + (1.0 - scalars.gate_alpha) * -torch.expm1(-lam)

    sigma2_hat = torch.clamp_min(state.r**2 - state.v, SIGMA2_MIN).mean(dim=1)
    sigma2 = torch.exp(
        (1.0 - scalars.gate_sigma) * torch.log(state.sigma2)
        + scalars.gate_sigma * torch.log(sigma2_hat)
    )
    return replace(
        state,
        lam=lam,
        alpha=alpha,
        sigma2=sigma2,
        ka_hat=ka_hat,
        pi=lam / ka_hat.unsqueeze(1),
    )


def _check_positive(state: DecoderState, layer: int) -> None:
    for name in ("nu", "v", "lam", "sigma2"):
        if not bool((getattr(state, name) > 0).all()):
            raise NumericError(f"decoder layer {layer}: {name} lost positivity")


# ============================================================================
# Decoding
# ============================================================================


def decode(
    y: Tensor,
    C: Tensor,
    params: DecoderParams,
    mode: DecoderMode | str | None = None,
    layers: int | None = None,
    *,
    pool_em: bool = False,
    verbose: bool = False,
) -> DecodeResult:
    """
    Run L decoder layers on one slot (l,) or a batch of slots (B, l).

    Args:
        y: Received signal(s).
        C: (l, n) sensing matrix.
        params: Decoder parameters.
        mode: Override params.mode; fixed uses FIXED_SCALARS and no CNN.
        layers: Number of layers to run (0 ≤ L ≤ params.config.layers).
        pool_em: Batch-average EM statistics.
        verbose: Emit per-layer structured diagnostics at DEBUG level.

    Returns:
        DecodeResult: x̂ (pre-projection) and K̂ₐ with per-layer diagnostics.
    """
    config = params.config
    mode = DecoderMode(mode or params.mode)
    depth = config.layers if layers is None else layers
    if not 0 <= depth <= config.layers:
        raise ShapeError(f"decode: {depth} layers requested, params hold {config.layers}")
    if C.shape != (config.l, config.n):
        raise ShapeError(f"decode: C {tuple(C.shape)} does not match (l, n)=({config.l}, {config.n})")
    if y.shape[-1] != config.l:
        raise ShapeError(f"decode: y has length {y.shape[-1]}, expected {config.l}")

    state = init_state(y, config.prior_ka_mean, config.n)
    diagnostics: list[LayerDiagnostics] = []
    for layer in range(depth):
        if mode is DecoderMode.FIXED:
            scalars, denoiser = FIXED_SCALARS, None
        else:
            scalars, denoiser = params.layer_scalars(layer), params.denoisers[layer]
        state = output_block(state, C, scalars)
        state, posterior, _ = input_block(state, C, scalars, config.support_max, denoiser)
        state = em_update(state, posterior, scalars, pool=pool_em)
        if settings.DEBUG:
            _check_positive(state, layer)
        record = LayerDiagnostics(
            layer=layer,
            residual_norm=float(state.r.detach().norm(dim=1).mean()),
            ka_hat=float(state.ka_hat.detach().mean()),
            sigma2=float(state.sigma2.detach().mean()),
            underflow=int(posterior.underflow.sum()),
        )
        diagnostics.append(record)
        if verbose:
            logger.debug("decoder layer", extra={"mode": mode.value, **record.__dict__})

    single = y.dim() == 1
    return DecodeResult(
        x_real=state.x_hat[0] if single else state.x_hat,
        ka_hat=state.ka_hat[0] if single else state.ka_hat,
        diagnostics=diagnostics,
        state=state,
    )


# ============================================================================
# Post-processing
# ============================================================================


def project_counts(x_real: Tensor, ka_hat: float | Tensor) -> ActivityVector:
    """
    Greedy ℓ2 projection onto non-negative integer vectors summing to K.

    K = round(K̂ₐ) floored at 0. Starting from floor(clip(x̂, 0)), units go to
    the largest residual x̂ − x (or come off the largest overshoot x − x̂)
    one at a time, lower index first on ties.

    Examples:
        >>> project_counts(numkernel.as_tensor([1.4, 0.9, -0.2]), 2.0).counts.tolist()
        [1, 1, 0]
    """
    target = max(0, math.floor(float(ka_hat) + 0.5))
    estimate = x_real.detach().to(numkernel.DTYPE).reshape(-1)
    counts = torch.floor(torch.clamp_min(estimate, 0.0)).to(torch.int64)
    total = int(counts.sum())
    while total < target:
        counts[int(torch.argmax(estimate - counts))] += 1
        total += 1
    while total > target:
        overshoot = torch.where(
            counts > 0, counts - estimate, torch.full_like(estimate, -math.inf)
        )
        counts[int(torch.argmax(overshoot))] -= 1
        total -= 1
    return ActivityVector(counts)


def project_batch(x_real: Tensor, ka_hat: Tensor) -> Tensor:
    """(B, n) estimates and (B,) K̂ₐ → (B, n) int64 counts."""
    return torch.stack(
        [project_counts(row, float(k)).counts for row, k in zip(x_real, ka_hat)]
    )
