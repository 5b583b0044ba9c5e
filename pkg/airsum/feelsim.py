"""
Desk-scale federated edge learning loop.

A synthetic Gaussian-mixture classification task stands in for image data.
Each round the BS trains on its own IID data and builds the quantisation
codebook; active devices train locally, apply error feedback, quantise and
send their updates over the configured uplink; the BS aggregates with a
symmetric rule and applies the global step.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from airsum import aggregate, channel, numkernel, uracode, vq
from airsum.decoder import DecoderMode, DecoderParams, decode, project_batch
from airsum.numkernel import RngStream
from airsum.serializers import FeelConfig, TaskConfig
from airsum.uracode import UraCodebook
from core.exceptions import ConfigError, DivergenceError, NumericError, PartitionError
from core.types import MetricRow, PathLike, Tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "round",
    "ka_true",
    "ka_hat",
    "mae_running",
    "recovery_acc",
    "test_acc",
    "global_loss",
    "rule",
    "snr_db",
    "mode",
    "seed",
]

RecordHook = Callable[[int, Tensor, Tensor], None]


# ============================================================================
# Synthetic task
# ============================================================================


@dataclass(frozen=True)
class TaskData:
    train_x: Tensor
    train_y: Tensor
    test_x: Tensor
    test_y: Tensor
    bs_x: Tensor
    bs_y: Tensor


def _mixture_samples(means: Tensor, count: int, rng: RngStream) -> tuple[Tensor, Tensor]:
    classes = means.shape[0]
    labels = (torch.arange(count) % classes)[numkernel.permutation(rng, count)]
    features = means[labels] + numkernel.gauss(rng, (count, means.shape[1]))
    return features, labels


def make_task_data(task: TaskConfig, rng: RngStream) -> TaskData:
    """Balanced Gaussian-mixture samples for devices, test set and BS."""
    scale = task.separation / math.sqrt(task.input_dim) * math.sqrt(task.classes)
    means = scale * numkernel.gauss(rng.split("means"), (task.classes, task.input_dim))
    train_x, train_y = _mixture_samples(means, task.train_samples, rng.split("train"))
    test_x, test_y = _mixture_samples(means, task.test_samples, rng.split("test"))
    bs_x, bs_y = _mixture_samples(means, task.bs_samples, rng.split("bs"))
    return TaskData(train_x, train_y, test_x, test_y, bs_x, bs_y)


def build_model(task: TaskConfig, rng: RngStream) -> nn.Sequential:
    """Perceptron with ReLU hidden layers, initialised from rng."""
    widths = [task.input_dim, *task.hidden, task.classes]
    layers: list[nn.Module] = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        linear = nn.Linear(fan_in, fan_out, dtype=numkernel.DTYPE)
        bound = 1.0 / math.sqrt(fan_in)
        stream = rng.split(f"layer{index}")
        with torch.no_grad():
            linear.weight.copy_(numkernel.uniform(stream, linear.weight.shape, -bound, bound))
            linear.bias.copy_(numkernel.uniform(stream, linear.bias.shape, -bound, bound))
        layers.append(linear)
        if index < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


@dataclass
class GlobalModel:
    """
    The global model w and its task.

    Attributes:
        network: Module whose parameters hold w.
        task: Task description.
    """

    network: nn.Module
    task: TaskConfig

    @classmethod
    def build(cls, task: TaskConfig, rng: RngStream) -> "GlobalModel":
        return cls(build_model(task, rng), task)

    @property
    def size(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def vector(self) -> Tensor:
        return parameters_to_vector(self.network.parameters()).detach().clone()

    def load(self, vector: Tensor) -> None:
        numkernel.ensure_finite(vector, "global model")
        with torch.no_grad():
            vector_to_parameters(vector, self.network.parameters())

    def loss(self, features: Tensor, labels: Tensor) -> float:
        with torch.no_grad():
            return float(F.cross_entropy(self.network(features), labels))

    def accuracy(self, features: Tensor, labels: Tensor) -> float:
        with torch.no_grad():
            predictions = self.network(features).argmax(dim=1)
        return float((predictions == labels).to(numkernel.DTYPE).mean())


# ============================================================================
# Devices
# ============================================================================


def partition_data(
    labels: Tensor, devices: int, iid_fraction: float, rng: RngStream
) -> list[Tensor]:
    """
    Split sample indices across devices.

    A random iid_fraction share is dealt uniformly; the rest is label-sorted
    and cut into contiguous shards, one per device. Shard sizes top each
    device up to its equal share, so device sizes differ by at most one.

    Returns:
        list: One int64 index tensor per device.

    Raises:
        PartitionError: If there are fewer samples than devices.
    """
    total = labels.numel()
    if total < devices:
        raise PartitionError(f"{total} samples cannot cover {devices} devices")
    order = numkernel.permutation(rng, total)
    iid_count = math.floor(iid_fraction * total + 0.5)
    iid_pool, rest = order[:iid_count], order[iid_count:]
    rest = rest[torch.sort(labels[rest], stable=True).indices]
    iid_chunks = torch.tensor_split(iid_pool, devices)
    targets = [total // devices + (k < total % devices) for k in range(devices)]
    shard_sizes = [target - chunk.numel() for target, chunk in zip(targets, iid_chunks)]
    shards = torch.split(rest, shard_sizes)
    return [torch.cat([iid, shard]) for iid, shard in zip(iid_chunks, shards)]


def local_train(
    model: GlobalModel,
    features: Tensor,
    labels: Tensor,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: RngStream,
) -> Tensor:
    """
    E epochs of minibatch SGD from the current global w; returns wₖ − w.

    The global model is restored before returning.

    Raises:
        NumericError: If the local loss becomes non-finite.
    """
    if epochs < 1:
        raise ValueError(f"local_train: epochs must be at least 1, got {epochs}")
    start = model.vector()
    optimiser = torch.optim.SGD(model.network.parameters(), lr=lr)
    count = labels.numel()
    try:
        for _ in range(epochs):
            order = numkernel.permutation(rng, count)
            for begin in range(0, count, batch_size):
                batch = order[begin : begin + batch_size]
                loss = F.cross_entropy(model.network(features[batch]), labels[batch])
                if not bool(torch.isfinite(loss)):
                    raise NumericError("local training loss is not finite")
                optimiser.zero_grad()
                loss.backward()
                optimiser.step()
        return model.vector() - start
    finally:
        model.load(start)


def corrupt(update: Tensor, scale: float, rng: RngStream) -> Tensor:
    """IID Gaussian replacement for update with expected norm ≈ scale."""
    return scale / math.sqrt(update.numel()) * numkernel.gauss(rng, update.shape)


def corrupted_count(fraction: float, ka: int) -> int:
    return math.floor(fraction * ka + 0.5)


# ============================================================================
# Metrics
# ============================================================================


def recovery_accuracy(x: Tensor, x_hat: Tensor) -> float:
    """
    Normalised ℓ1 accuracy 1 − ‖x − x̂‖₁ / ‖x‖₁.

    Raises:
        NumericError: If x is all zero.

    Examples:
        >>> recovery_accuracy(torch.tensor([1, 1, 0]), torch.tensor([1, 0, 1]))
        0.0
    """
    truth = x.to(numkernel.DTYPE)
    reference = float(truth.abs().sum())
    if reference == 0.0:
        raise NumericError("recovery_accuracy: zero ground truth")
    return 1.0 - float((truth - x_hat.to(numkernel.DTYPE)).abs().sum()) / reference


def mae(true: Tensor | list[float], estimated: Tensor | list[float]) -> float:
    """Mean absolute error between two equal-length sequences."""
    a = torch.as_tensor(true, dtype=numkernel.DTYPE)
    b = torch.as_tensor(estimated, dtype=numkernel.DTYPE)
    return float((a - b).abs().mean())


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    ka_true: int
    ka_hat: float
    mae_running: float
    recovery_acc: float
    test_acc: float
    global_loss: float
    rule: str
    snr_db: float
    mode: str
    seed: int

    def as_row(self) -> MetricRow:
        return asdict(self)


def metrics_frame(metrics: list[RoundMetrics]) -> pd.DataFrame:
    return pd.DataFrame([m.as_row() for m in metrics], columns=METRIC_COLUMNS)


def write_metrics(metrics: list[RoundMetrics], path: PathLike) -> None:
    metrics_frame(metrics).to_csv(path, index=False)


# ============================================================================
# Uplink
# ============================================================================


@dataclass(frozen=True)
class UplinkResult:
    """
    Attributes:
        aggregate: (W,) aggregated update g.
        dequantised: (P, W) per-participant Q(s) for error feedback.
        ka_hat: Mean pre-rounding K̂ₐ over slots.
        recovery_acc: Mean normalised ℓ1 accuracy over non-empty slots.
    """

    aggregate: Tensor
    dequantised: Tensor
    ka_hat: float
    recovery_acc: float


@dataclass
class DigitalLink:
    """URA codebook, channel and decoder used by the digital OTA uplink."""

    codebook: UraCodebook
    params: DecoderParams
    mode: DecoderMode
    snr_db: float

    def receive(self, counts: Tensor, rng: RngStream) -> tuple[Tensor, Tensor]:
        """(J, n) true counts → projected (J, n) counts and (J,) K̂ₐ."""
        with torch.no_grad():
            C = self.codebook.sensing_matrix().detach()
            signals = uracode.transmit_batch(counts, C)
            ka = int(counts[0].sum())
            received = channel.apply(signals, channel.ChannelConfig(self.snr_db, ka), rng)
            result = decode(received, C, self.params, self.mode)
            return project_batch(result.x_real, result.ka_hat), result.ka_hat.detach()


def _slot_accuracy(truth: Tensor, estimate: Tensor) -> float:
    scores = [
        recovery_accuracy(x, x_hat) for x, x_hat in zip(truth, estimate) if int(x.sum()) > 0
    ]
    return sum(scores) / len(scores) if scores else 1.0


def send(
    updates: Tensor,
    cb: vq.QuantCodebook | None,
    config: FeelConfig,
    link: DigitalLink | None,
    rng: RngStream,
) -> UplinkResult:
    """Run one round's uplink for (P, W) participant updates."""
    participants, size = updates.shape
    rule = config.uplink.aggregation_rule
    if config.uplink.kind == "perfect":
        return UplinkResult(updates.mean(dim=0), updates, float(participants), 1.0)

    indices = torch.stack([vq.quantise_many(vq.fragment(s, cb.d), cb) for s in updates])
    dequantised = torch.stack(
        [vq.defragment(vq.dequantise(row, cb), size) for row in indices]
    )
    truth = uracode.encode_slots(indices, cb.n)
    if config.uplink.kind == "quantised":
        g = aggregate.aggregate_round(truth, cb, rule, float(participants), size)
        return UplinkResult(g, dequantised, float(participants), 1.0)

    counts, ka_hats = link.receive(truth, rng)
    g = aggregate.aggregate_round(counts, cb, rule, aggregate.round_ka(ka_hats), size)
    return UplinkResult(g, dequantised, float(ka_hats.mean()), _slot_accuracy(truth, counts))


# ============================================================================
# Run
# ============================================================================


@dataclass
class FeelSetup:
    """Everything a run derives from its seed before round 0."""

    rng: RngStream
    data: TaskData
    shards: list[Tensor]
    model: GlobalModel

    @classmethod
    def create(cls, config: FeelConfig) -> "FeelSetup":
        rng = RngStream(config.seed, "feel")
        data = make_task_data(config.task, rng.split("data"))
        shards = partition_data(
            data.train_y, config.devices, config.iid_fraction, rng.split("partition")
        )
        return cls(rng, data, shards, GlobalModel.build(config.task, rng.split("model")))


@dataclass
class FeelResult:
    metrics: list[RoundMetrics] = field(default_factory=list)
    final_parameters: Tensor | None = None

    def frame(self) -> pd.DataFrame:
        return metrics_frame(self.metrics)


def run(
    config: FeelConfig,
    *,
    codebook: UraCodebook | None = None,
    params: DecoderParams | None = None,
    record_hook: RecordHook | None = None,
) -> FeelResult:
    """
    Run config.rounds FEEL rounds.

    Args:
        config: Run configuration.
        codebook: URA codebook; required for the digital_ota uplink.
        params: Decoder parameters; required for the digital_ota uplink.
        record_hook: Called with (round, BS update, (K, W) device updates
            after error feedback) every round.

    Returns:
        FeelResult: Per-round metrics and the final parameter vector.

    Raises:
        ConfigError: digital_ota without a codebook and decoder.
        DivergenceError: The global loss became non-finite; carries the
            metrics collected so far.
    """
    link = None
    if config.uplink.kind == "digital_ota":
        if codebook is None or params is None:
            raise ConfigError("digital_ota uplink needs a URA codebook and decoder parameters")
        if codebook.n != config.quantiser.n:
            raise ConfigError(
                f"URA codebook has {codebook.n} codewords, quantiser uses n={config.quantiser.n}"
            )
        link = DigitalLink(codebook, params, config.uplink.mode, config.uplink.snr_db)

    setup = FeelSetup.create(config)
    model, data = setup.model, setup.data
    ef_enabled = config.error_feedback_enabled
    ef_states = [
        vq.ErrorFeedbackState.zeros(model.size, enabled=ef_enabled) for _ in range(config.devices)
    ]
    result = FeelResult()
    norm_total, norm_count = 0.0, 0
    ka_errors: list[float] = []
    rule_name = str(config.uplink.aggregation_rule)
    mode_name = config.uplink.mode.value if config.uplink.kind == "digital_ota" else config.uplink.kind

    logger.info(
        "FEEL run: %d rounds, K_t=%d, W=%d, uplink=%s, rule=%s, EF=%s",
        config.rounds,
        config.devices,
        model.size,
        config.uplink.kind,
        rule_name,
        ef_enabled,
    )
    for t in range(config.rounds):
        round_rng = setup.rng.split(f"round{t}")
        ka = numkernel.integers(round_rng.split("ka"), config.ka_min, config.ka_max)
        active = numkernel.permutation(round_rng.split("active"), config.devices)[:ka].tolist()

        try:
            bs_update = local_train(
                model, data.bs_x, data.bs_y, config.local_epochs, config.local_lr,
                config.local_batch, round_rng.split("bs"),
            )
            raw = {
                k: local_train(
                    model, data.train_x[setup.shards[k]], data.train_y[setup.shards[k]],
                    config.local_epochs, config.local_lr, config.local_batch,
                    round_rng.split(f"device{k}"),
                )
                for k in active
            }
        except NumericError as exc:
            raise DivergenceError(f"round {t}: {exc}", result.metrics) from exc

        for update in [bs_update, *raw.values()]:
            norm_total += float(update.norm())
            norm_count += 1
        corrupted = set(active[: corrupted_count(config.corruption_fraction, ka)])
        for k in corrupted:
            raw[k] = corrupt(
                raw[k], config.corruption_scale * norm_total / norm_count,
                round_rng.split(f"corrupt{k}"),
            )

        corrected = torch.stack([vq.apply_error_feedback(raw[k], ef_states[k]) for k in active])
        if record_hook is not None:
            record_hook(t, bs_update, corrected)
        participants = torch.cat([corrected, bs_update.unsqueeze(0)]) if config.include_bs else corrected

        cb = None
        if config.uplink.kind != "perfect":
            bs_fragments = vq.fragment(bs_update, config.quantiser.d)
            curvature = (
                vq.CurvatureProxy.from_fragments(bs_fragments, config.quantiser.epsilon)
                if config.quantiser.curvature
                else None
            )
            cb = vq.build_codebook(
                bs_fragments, config.quantiser.n, curvature, round_rng.split("codebook"),
                round_index=t, ordered=config.quantiser.ordered,
            )
        uplink = send(participants, cb, config, link, round_rng.split("channel"))

        for slot, k in enumerate(active):
            vq.record_residual(ef_states[k], corrected[slot], uplink.dequantised[slot])
            residual = float(ef_states[k].accumulator.norm())
            if residual > config.ef_warning_ratio * float(raw[k].norm()):
                logger.warning(
                    "Round %d device %d: error-feedback residual %.3g exceeds %.0fx update norm",
                    t, k, residual, config.ef_warning_ratio,
                )

        updated = model.vector() + config.global_lr * uplink.aggregate
        if not bool(torch.isfinite(updated).all()):
            raise DivergenceError(f"round {t}: global parameters are not finite", result.metrics)
        model.load(updated)
        global_loss = model.loss(data.train_x, data.train_y)
        ka_true = participants.shape[0]
        ka_errors.append(abs(ka_true - uplink.ka_hat))
        metrics = RoundMetrics(
            round=t,
            ka_true=ka_true,
            ka_hat=uplink.ka_hat,
            mae_running=sum(ka_errors) / len(ka_errors),
            recovery_acc=uplink.recovery_acc,
            test_acc=model.accuracy(data.test_x, data.test_y),
            global_loss=global_loss,
            rule=rule_name,
            snr_db=config.uplink.snr_db,
            mode=mode_name,
            seed=config.seed,
        )
        result.metrics.append(metrics)
        if not math.isfinite(global_loss):
            raise DivergenceError(f"round {t}: global loss is not finite", result.metrics)
        logger.info(
            "Round %d: ka=%d ka_hat=%.2f acc=%.4f loss=%.4f recovery=%.4f",
            t, ka_true, uplink.ka_hat, metrics.test_acc, global_loss, uplink.recovery_acc,
        )

    result.final_parameters = model.vector()
    return result
