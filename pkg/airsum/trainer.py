"""
Offline end-to-end pre-training of the decoder and URA codebook.

Round records come from a perfect-aggregation FEEL run. Each record is one
gradient-accumulation block: its fragment slots are quantised against the
codebook the BS would have built that round, sent through the channel at a
random SNR and decoded, and one optimiser update is applied per block.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import chain

import pandas as pd
import torch

from airsum import channel, container, numkernel, uracode, vq
from airsum.decoder import DecoderConfig, DecoderMode, DecoderParams, decode, project_batch
from airsum.feelsim import mae, recovery_accuracy, run
from airsum.numkernel import GradTape, RngStream, backward
from airsum.serializers import FeelConfig, QuantiserConfig, TrainConfig, UplinkConfig
from airsum.uracode import CodebookMode, UraCodebook
from core.exceptions import ConfigError, NumericError, ShapeError, TrainingAborted
from core.types import JSONDict, PathLike, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
DATASET_KIND = "dataset"
L1_EPSILON = 1e-8


# ============================================================================
# Dataset
# ============================================================================


@dataclass(frozen=True)
class RoundRecord:
    """
    One FEEL round of raw updates.

    Attributes:
        round_index: Round the updates were produced in.
        bs_update: (W,) BS update.
        device_updates: (K, W) error-feedback-corrected device updates.
    """

    round_index: int
    bs_update: Tensor
    device_updates: Tensor

    def __post_init__(self) -> None:
        if self.device_updates.dim() != 2 or self.device_updates.shape[1] != self.bs_update.numel():
            raise ShapeError(
                f"round record: device updates {tuple(self.device_updates.shape)} "
                f"do not match W={self.bs_update.numel()}"
            )

    @property
    def ka(self) -> int:
        return int(self.device_updates.shape[0])


def collect_dataset(feel_config: FeelConfig, rng: RngStream | None = None) -> list[RoundRecord]:
    """
    Run a perfect-aggregation FEEL loop and keep every round's updates.

    Args:
        feel_config: FEEL settings; the uplink is forced to perfect.
        rng: Overrides the config seed with rng.seed when given.

    Raises:
        DivergenceError: The PA run diverged.
    """
    update: dict = {"uplink": UplinkConfig(kind="perfect")}
    if rng is not None:
        update["seed"] = rng.seed
    config = feel_config.model_copy(update=update)
    records: list[RoundRecord] = []

    def keep(round_index: int, bs_update: Tensor, device_updates: Tensor) -> None:
        records.append(RoundRecord(round_index, bs_update.clone(), device_updates.clone()))

    run(config, record_hook=keep)
    logger.info("Collected %d round records (seed %d)", len(records), config.seed)
    return records


def save_dataset(records: list[RoundRecord], path: PathLike, meta: JSONDict | None = None) -> None:
    arrays: dict[str, Tensor] = {}
    for index, record in enumerate(records):
        arrays[f"record{index}.bs"] = record.bs_update
        arrays[f"record{index}.devices"] = record.device_updates
    header = {
        **(meta or {}),
        "record_count": len(records),
        "round_indices": [record.round_index for record in records],
    }
    container.write(path, DATASET_KIND, header, arrays)


def load_dataset(path: PathLike) -> list[RoundRecord]:
    """Read records written by save_dataset."""
    data = container.read(path, DATASET_KIND)
    return [
        RoundRecord(
            round_index,
            data.arrays[f"record{index}.bs"],
            data.arrays[f"record{index}.devices"],
        )
        for index, round_index in enumerate(data.meta["round_indices"])
    ]


@dataclass(frozen=True)
class PreparedRecord:
    """
    A record turned into decoder training targets.

    Attributes:
        counts: (J, n) ground-truth activity vectors.
        ka: Active devices.
        quant_residual: Σ over devices of ‖s − Q(s)‖² / (‖s‖² + ε).
        codebook: The round's quantisation codebook.
    """

    counts: Tensor
    ka: int
    quant_residual: float
    codebook: vq.QuantCodebook


def prepare_record(record: RoundRecord, quantiser: QuantiserConfig, rng: RngStream) -> PreparedRecord:
    bs_fragments = vq.fragment(record.bs_update, quantiser.d)
    curvature = (
        vq.CurvatureProxy.from_fragments(bs_fragments, quantiser.epsilon)
        if quantiser.curvature
        else None
    )
    cb = vq.build_codebook(
        bs_fragments, quantiser.n, curvature, rng, record.round_index, quantiser.ordered
    )
    indices = []
    residual = 0.0
    for s in record.device_updates:
        slot_indices, dequantised = vq.quantise_update(s, cb)
        indices.append(slot_indices)
        residual += vq.quantisation_residual_ratio(s, dequantised)
    counts = uracode.encode_slots(torch.stack(indices), cb.n)
    return PreparedRecord(counts.to(numkernel.DTYPE), record.ka, residual, cb)


# ============================================================================
# Loss
# ============================================================================


def compose_loss(
    x_hat: Tensor,
    x: Tensor,
    ka_hat: Tensor,
    ka: float | Tensor,
    cb: UraCodebook,
    config: TrainConfig,
    quant_residual: float | None = None,
) -> Tensor:
    """
    Training loss averaged over slots.

    Per slot ‖x̂ − x‖² + λ₁‖x̂‖₁/(‖x‖₁ + ε) + λ_K(K̂ₐ − kₐ)², plus
    λ_W‖WᵀW − I‖²_F and, when quant_loss is on, λ_q times the
    quantisation residual.

    The residual comes from fixed device updates and a fixed quantisation
    codebook, so the λ_q term shifts the reported loss but has no gradient.

    Examples:
        >>> loss = compose_loss(x, x, k, k, cb, TrainConfig(lambda_l1=0.0))
        >>> float(loss)
        0.0
    """
    x_hat = x_hat if x_hat.dim() == 2 else x_hat.unsqueeze(0)
    x = x.to(numkernel.DTYPE)
    x = x if x.dim() == 2 else x.unsqueeze(0)
    ka_hat = ka_hat.reshape(-1)
    target = torch.as_tensor(ka, dtype=numkernel.DTYPE)
    per_slot = (
        ((x_hat - x) ** 2).sum(dim=-1)
        + config.lambda_l1 * x_hat.abs().sum(dim=-1) / (x.abs().sum(dim=-1) + L1_EPSILON)
        + config.lambda_k * (ka_hat - target) ** 2
    )
    loss = per_slot.mean() + config.lambda_w * uracode.orthogonality_penalty(cb)
    if config.quant_loss and quant_residual is not None:
        loss = loss + config.lambda_q * quant_residual
    return loss


def chunk_loss(
    counts: Tensor,
    ka: int,
    quant_residual: float | None,
    params: DecoderParams,
    cb: UraCodebook,
    config: TrainConfig,
    rng: RngStream,
) -> Tensor:
    """Transmit (B, n) counts at per-slot random SNRs, decode and score."""
    snrs = numkernel.uniform(rng, (counts.shape[0],), config.snr_min, config.snr_max)
    C = cb.sensing_matrix()
    signals = uracode.transmit_batch(counts, C)
    cfgs = [channel.ChannelConfig(float(snr), ka) for snr in snrs]
    noise = channel.apply_many(torch.zeros_like(signals.detach()), cfgs, rng)
    received = signals + noise
    result = decode(received, C, params, pool_em=True)
    return compose_loss(result.x_real, counts, result.ka_hat, ka, cb, config, quant_residual)


# ============================================================================
# Checkpoints
# ============================================================================


@dataclass
class Checkpoint:
    """
    Decoder parameters and URA codebook with their training context.

    Attributes:
        params: Decoder parameters.
        codebook: URA codebook.
        train_config: Settings the parameters were trained with.
        epoch: Epoch the parameters come from (0 = initialisation).
        val_loss: Validation loss at that epoch.
        version: Container format version.
    """

    params: DecoderParams
    codebook: UraCodebook
    train_config: TrainConfig
    epoch: int
    val_loss: float
    version: int = container.FORMAT_VERSION

    @property
    def decoder_config(self) -> DecoderConfig:
        return self.params.config


def _snapshot(
    params: DecoderParams, cb: UraCodebook, config: TrainConfig, epoch: int, val_loss: float
) -> Checkpoint:
    return Checkpoint(copy.deepcopy(params), copy.deepcopy(cb), config, epoch, val_loss)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> None:
    arrays = {f"params.{name}": value for name, value in checkpoint.params.state_dict().items()}
    arrays["codebook.D"] = checkpoint.codebook.D
    arrays["codebook.W"] = checkpoint.codebook.W
    meta = {
        "decoder_config": asdict(checkpoint.decoder_config),
        "decoder_mode": checkpoint.params.mode.value,
        "codebook_mode": checkpoint.codebook.mode.value,
        "train_config": checkpoint.train_config.model_dump(mode="json"),
        "epoch": checkpoint.epoch,
        "val_loss": checkpoint.val_loss,
    }
    container.write(path, CHECKPOINT_KIND, meta, arrays)


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Read a checkpoint.

    Raises:
        ContainerCorruptError: Truncated or damaged file.
        ContainerVersionError: Written by another format version.
    """
    data = container.read(path, CHECKPOINT_KIND)
    meta = data.meta
    params = DecoderParams(DecoderConfig(**meta["decoder_config"]), meta["decoder_mode"])
    params.load_state_dict(
        {
            name.removeprefix("params."): value
            for name, value in data.arrays.items()
            if name.startswith("params.")
        }
    )
    codebook = UraCodebook(
        data.arrays["codebook.D"], data.arrays["codebook.W"], CodebookMode(meta["codebook_mode"])
    )
    return Checkpoint(
        params=params,
        codebook=codebook,
        train_config=TrainConfig.model_validate(meta["train_config"]),
        epoch=meta["epoch"],
        val_loss=meta["val_loss"],
        version=data.version,
    )


# ============================================================================
# Training
# ============================================================================


@dataclass
class TrainResult:
    """
    Attributes:
        checkpoint: Best-validation checkpoint.
        history: Rows of epoch, train_loss, val_loss, lr.
        test_loss: Test-split loss of the returned checkpoint.
    """

    checkpoint: Checkpoint
    history: list[JSONDict] = field(default_factory=list)
    test_loss: float = math.nan


def _record_chunks(record: PreparedRecord, batch_size: int) -> list[Tensor]:
    return list(torch.split(record.counts, batch_size))


def evaluate(
    records: list[PreparedRecord],
    params: DecoderParams,
    cb: UraCodebook,
    config: TrainConfig,
    rng: RngStream,
) -> float:
    """Mean block loss over records, without gradients."""
    if not records:
        return math.nan
    total = 0.0
    with torch.no_grad():
        for index, record in enumerate(records):
            slots = record.counts.shape[0]
            block = 0.0
            for chunk_index, chunk in enumerate(_record_chunks(record, config.batch_size)):
                stream = rng.split(f"record{index}/chunk{chunk_index}")
                loss = chunk_loss(chunk, record.ka, record.quant_residual, params, cb, config, stream)
                block += float(loss) * chunk.shape[0] / slots
            total += block
    return total / len(records)


def train_block(
    record: PreparedRecord,
    params: DecoderParams,
    cb: UraCodebook,
    config: TrainConfig,
    optimiser: torch.optim.Optimizer,
    rng: RngStream,
) -> float:
    """
    Accumulate gradients over one record's slots and take one step.

    Chunk gradients are weighted by chunk size over slot count so the step
    follows the slot-averaged block loss. Rows of a trainable D W are
    renormalised after the step; fixed codebooks are left bit-for-bit alone.
    """
    named = [
        (f"decoder.{name}", p) for name, p in params.named_parameters() if p.requires_grad
    ] + [(f"codebook.{name}", p) for name, p in cb.named_parameters() if p.requires_grad]
    slots = record.counts.shape[0]
    optimiser.zero_grad()
    block = 0.0
    for chunk_index, chunk in enumerate(_record_chunks(record, config.batch_size)):
        weight = chunk.shape[0] / slots
        loss = chunk_loss(
            chunk, record.ka, record.quant_residual, params, cb, config,
            rng.split(f"chunk{chunk_index}"),
        )
        tape = GradTape().watch_all(named)
        grads = backward(tape, loss * weight)
        for name, p in named:
            p.grad = grads[name] if p.grad is None else p.grad + grads[name]
        block += float(loss) * weight
    optimiser.step()
    if cb.mode.trainable:
        uracode.renormalise(cb)
    return block


def train(
    records: list[RoundRecord],
    config: TrainConfig,
    decoder_config: DecoderConfig,
    quantiser: QuantiserConfig,
    *,
    codebook_mode: CodebookMode | str = CodebookMode.LEARNED,
    decoder_mode: DecoderMode | str = DecoderMode.LEARNED,
    seed: int = 0,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """
    Train decoder parameters and codebook on round records.

    Records are split in order into train, validation and test blocks. Epoch
    0 is the untrained evaluation; each later epoch takes one step per
    training block. The learning rate halves every halving_patience epochs
    without improvement and training stops after patience such epochs.

    Args:
        records: Round records, at least train+val+test of them.
        config: Training settings.
        decoder_config: Decoder shape; n must match the quantiser.
        quantiser: Quantiser settings used to rebuild each round's codebook.
        codebook_mode: URA codebook parameterisation.
        decoder_mode: learned or fixed decoder.
        seed: Root seed of every training draw.
        resume: Continue from this checkpoint; epoch numbering continues.

    Returns:
        TrainResult: Best-validation checkpoint, history and test loss.

    Raises:
        ConfigError: Too few records or an n mismatch.
        TrainingAborted: A loss or gradient became non-finite or codeword
            rows drifted from unit norm; carries the last good checkpoint.
    """
    needed = config.train_records + config.val_records + config.test_records
    if len(records) < needed:
        raise ConfigError(f"train: {len(records)} records, configuration needs {needed}")
    if decoder_config.n != quantiser.n:
        raise ConfigError(f"train: decoder n={decoder_config.n} but quantiser n={quantiser.n}")

    rng = RngStream(seed, "trainer")
    prepared = [
        prepare_record(record, quantiser, rng.split(f"prepare{index}"))
        for index, record in enumerate(records[:needed])
    ]
    train_set = prepared[: config.train_records]
    val_set = prepared[config.train_records : config.train_records + config.val_records]
    test_set = prepared[config.train_records + config.val_records :]

    if resume is not None:
        params, cb = copy.deepcopy(resume.params), copy.deepcopy(resume.codebook)
        first_epoch = resume.epoch + 1
    else:
        cb = uracode.init_codebook(
            decoder_config.n, decoder_config.l, codebook_mode, rng.split("codebook")
        )
        params = DecoderParams(decoder_config, decoder_mode, rng.split("decoder"))
        first_epoch = 1

    trainable = [p for p in chain(params.parameters(), cb.parameters()) if p.requires_grad]
    history: list[JSONDict] = []

    def validation_loss() -> float:
        try:
            return evaluate(val_set, params, cb, config, RngStream(seed, "validation"))
        except NumericError:
            return math.nan

    best_val = validation_loss() if resume is None else resume.val_loss
    if not math.isfinite(best_val):
        raise TrainingAborted("initial validation loss is not finite")
    best = _snapshot(params, cb, config, first_epoch - 1, best_val)
    if resume is None:
        history.append({"epoch": 0, "train_loss": math.nan, "val_loss": best_val, "lr": config.lr})
    logger.info("Epoch %d: val_loss=%.6g", first_epoch - 1, best_val)

    if not trainable or config.max_epochs == 0:
        if not trainable:
            logger.warning("Nothing to train: decoder and codebook are both fixed")
        test_loss = evaluate(test_set, best.params, best.codebook, config, RngStream(seed, "test"))
        return TrainResult(best, history, test_loss)

    optimiser = torch.optim.Adam(
        trainable, lr=config.lr, betas=config.adam_betas, eps=config.adam_eps
    )
    # reduction fires once more than `patience` epochs have stalled
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimiser,
        mode="min",
        factor=0.5,
        patience=config.halving_patience - 1,
        threshold=config.tolerance,
        threshold_mode="abs",
    )
    scheduler.best = best_val
    reference, stale = best_val, 0
    for epoch in range(first_epoch, first_epoch + config.max_epochs):
        epoch_rng = rng.split(f"epoch{epoch}")
        order = numkernel.permutation(epoch_rng.split("order"), len(train_set)).tolist()
        try:
            losses = [
                train_block(
                    train_set[i], params, cb, config, optimiser, epoch_rng.split(f"block{i}")
                )
                for i in order
            ]
        except NumericError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", best) from exc
        train_loss = sum(losses) / len(losses)
        val_loss = validation_loss()
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingAborted(f"epoch {epoch}: non-finite loss", best)
        if cb.row_norm_error() > uracode.ROW_NORM_TOLERANCE:
            raise TrainingAborted(f"epoch {epoch}: codeword rows drifted from unit norm", best)

        if val_loss < reference - config.tolerance:
            reference, stale = val_loss, 0
        else:
            stale += 1
        lr_before = optimiser.param_groups[0]["lr"]
        scheduler.step(val_loss)
        lr = optimiser.param_groups[0]["lr"]
        if lr < lr_before:
            logger.info("Epoch %d: learning rate halved to %.3g", epoch, lr)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        logger.info("Epoch %d: train_loss=%.6g val_loss=%.6g lr=%.3g", epoch, train_loss, val_loss, lr)

        if val_loss < best.val_loss:
            best = _snapshot(params, cb, config, epoch, val_loss)
        if stale >= config.patience:
            logger.info("Early stopping at epoch %d (best epoch %d)", epoch, best.epoch)
            break

    test_loss = evaluate(test_set, best.params, best.codebook, config, RngStream(seed, "test"))
    logger.info("Best epoch %d: val_loss=%.6g test_loss=%.6g", best.epoch, best.val_loss, test_loss)
    return TrainResult(best, history, test_loss)


def write_history(history: list[JSONDict], path: PathLike) -> None:
    pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "lr"]).to_csv(path, index=False)


# ============================================================================
# Benchmark
# ============================================================================


@dataclass(frozen=True)
class BenchRow:
    snr_db: float
    seed: int
    mode: str
    slots: int
    recovery_acc: float
    ka_mae: float


def random_slots(
    count: int, n: int, ka_min: int, ka_max: int, rng: RngStream
) -> list[Tensor]:
    """Activity vectors with uniform K_a and uniformly chosen codewords."""
    slots = []
    for _ in range(count):
        ka = numkernel.integers(rng, ka_min, ka_max)
        chosen = torch.randint(0, n, (ka,), generator=rng.generator)
        slots.append(uracode.encode_slot(chosen, n).counts)
    return slots


def benchmark(
    slots: list[Tensor],
    params: DecoderParams,
    cb: UraCodebook,
    snr_db: float,
    mode: DecoderMode | str,
    rng: RngStream,
    seed: int = 0,
) -> BenchRow:
    """Decoder-only recovery accuracy and K̂ₐ MAE over the given slots."""
    mode = DecoderMode(mode)
    C = cb.sensing_matrix().detach()
    accuracies, kas, ka_hats = [], [], []
    with torch.no_grad():
        for index, counts in enumerate(slots):
            ka = int(counts.sum())
            signal = uracode.transmit(counts, cb).detach()
            received = channel.apply(signal, channel.ChannelConfig(snr_db, ka), rng.split(f"slot{index}"))
            result = decode(received.unsqueeze(0), C, params, mode)
            estimate = project_batch(result.x_real, result.ka_hat)[0]
            accuracies.append(recovery_accuracy(counts, estimate))
            kas.append(float(ka))
            ka_hats.append(float(result.ka_hat[0]))
    return BenchRow(
        snr_db=snr_db,
        seed=seed,
        mode=mode.value,
        slots=len(slots),
        recovery_acc=sum(accuracies) / len(accuracies),
        ka_mae=mae(kas, ka_hats),
    )
