"""
Command-line front end for airsum.
Subcommands: collect, train, eval, bench.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd
import torch

from airsum import feelsim, trainer, uracode
from airsum.decoder import DecoderMode, DecoderParams
from airsum.numkernel import RngStream
from airsum.serializers import ExperimentConfig, load_config, write_resolved
from airsum.uracode import CodebookMode, UraCodebook
from config import settings
from core.exceptions import (
    CodewordIndexError,
    ConfigError,
    ContainerError,
    DivergenceError,
    NumericError,
    PartitionError,
    TapeError,
    TrainingAborted,
)

logger = logging.getLogger("airsum.cli")

DATASET_FILE = "dataset.airsum"
CHECKPOINT_FILE = "checkpoint.airsum"
ABORTED_CHECKPOINT_FILE = "checkpoint_aborted.airsum"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="torch threads (default: AIRSUM_THREADS)")
    common.add_argument("--verbose", action="store_true", help="debug logging with decoder diagnostics")
    common.add_argument("--out", type=Path, help="existing output directory")

    parser = argparse.ArgumentParser(prog="airsum", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("collect", parents=[common], help="collect round records from a PA run")

    train = commands.add_parser("train", parents=[common], help="pre-train decoder and codebook")
    train.add_argument("--dataset", type=Path, required=True)
    train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train.add_argument("--mode", choices=[m.value for m in DecoderMode])
    train.add_argument("--codebook-mode", choices=[m.value for m in CodebookMode])

    evaluate = commands.add_parser("eval", parents=[common], help="FEEL sweep over SNRs")
    evaluate.add_argument("--checkpoint", type=Path)
    evaluate.add_argument("--snr", type=float, nargs="+")
    evaluate.add_argument("--rule", help='e.g. "mean", "majority", "trimmed_mean:0.8"')
    evaluate.add_argument("--mode", choices=[m.value for m in DecoderMode])
    evaluate.add_argument(
        "--uplink", choices=["digital_ota", "quantised", "perfect"], default="digital_ota"
    )

    bench = commands.add_parser("bench", parents=[common], help="decoder-only benchmark")
    bench.add_argument("--checkpoint", type=Path)
    bench.add_argument("--snr", type=float, nargs="+")
    bench.add_argument("--mode", choices=[m.value for m in DecoderMode])
    bench.add_argument("--dataset", type=Path, help="take slots from this dataset's test split")
    return parser


# ============================================================================
# Helpers
# ============================================================================


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides.update(seed=args.seed, feel__seed=args.seed, eval__seeds=[args.seed],
                         bench__seeds=[args.seed])
    if getattr(args, "rule", None):
        overrides["feel__uplink__rule"] = args.rule
    if getattr(args, "mode", None):
        overrides["feel__uplink__mode"] = args.mode
    if getattr(args, "codebook_mode", None):
        overrides["codebook__mode"] = args.codebook_mode
    if getattr(args, "snr", None):
        overrides.update(eval__snr_list=args.snr, bench__snr_list=args.snr)
    return config.with_overrides(**overrides) if overrides else config


def _decoder_and_codebook(
    config: ExperimentConfig, checkpoint: Path | None, mode: DecoderMode
) -> tuple[DecoderParams, UraCodebook]:
    """Checkpointed decoder and codebook, or a fresh fixed baseline."""
    if checkpoint is not None:
        loaded = trainer.load_checkpoint(checkpoint)
        return loaded.params, loaded.codebook
    if mode is not DecoderMode.FIXED:
        raise ConfigError("the learned decoder needs --checkpoint")
    decoder_config = config.decoder_config()
    rng = RngStream(config.seed, "baseline")
    codebook = uracode.init_codebook(
        decoder_config.n, decoder_config.l, CodebookMode.FIXED_GAUSSIAN, rng.split("codebook")
    )
    return DecoderParams(decoder_config, DecoderMode.FIXED, rng.split("decoder")), codebook


# ============================================================================
# Commands
# ============================================================================


def cmd_collect(args: argparse.Namespace, config: ExperimentConfig, out: Path) -> int:
    records = trainer.collect_dataset(config.feel)
    target = out / DATASET_FILE
    trainer.save_dataset(records, target, {"feel": config.feel.model_dump(mode="json")})
    print(f"{len(records)} records -> {target}")
    return settings.EXIT_OK


def cmd_train(args: argparse.Namespace, config: ExperimentConfig, out: Path) -> int:
    records = trainer.load_dataset(args.dataset)
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    try:
        result = trainer.train(
            records,
            config.trainer,
            config.decoder_config(),
            config.feel.quantiser,
            codebook_mode=config.codebook.mode,
            decoder_mode=config.feel.uplink.mode,
            seed=config.seed,
            resume=resume,
        )
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            trainer.save_checkpoint(exc.checkpoint, out / ABORTED_CHECKPOINT_FILE)
        raise
    trainer.save_checkpoint(result.checkpoint, out / CHECKPOINT_FILE)
    trainer.write_history(result.history, out / "training.csv")
    print(
        f"best epoch {result.checkpoint.epoch}: val_loss={result.checkpoint.val_loss:.6g} "
        f"test_loss={result.test_loss:.6g}"
    )
    return settings.EXIT_OK


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig, out: Path) -> int:
    mode = config.feel.uplink.mode
    params = codebook = None
    if args.uplink == "digital_ota":
        params, codebook = _decoder_and_codebook(config, args.checkpoint, mode)
    frames = []
    for snr in config.eval.snr_list:
        for seed in config.eval.seeds:
            uplink = config.feel.uplink.model_copy(update={"kind": args.uplink, "snr_db": snr})
            feel = config.feel.model_copy(update={"seed": seed, "uplink": uplink})
            try:
                metrics = feelsim.run(feel, codebook=codebook, params=params).metrics
            except DivergenceError as exc:
                logger.warning("Run at %s dB, seed %d diverged: %s", snr, seed, exc)
                metrics = exc.metrics
            frames.append(feelsim.metrics_frame(metrics))
    target = out / "metrics.csv"
    pd.concat(frames, ignore_index=True).to_csv(target, index=False)
    print(f"{len(frames)} sweep groups -> {target}")
    return settings.EXIT_OK


def cmd_bench(args: argparse.Namespace, config: ExperimentConfig, out: Path) -> int:
    mode = config.feel.uplink.mode
    params, codebook = _decoder_and_codebook(config, args.checkpoint, mode)
    rows = []
    for seed in config.bench.seeds:
        rng = RngStream(seed, "bench")
        if config.bench.source == "dataset" or args.dataset is not None:
            if args.dataset is None:
                raise ConfigError("bench.source=dataset needs --dataset")
            records = trainer.load_dataset(args.dataset)
            tc = config.trainer
            test = records[tc.train_records + tc.val_records :][: tc.test_records]
            slots = [
                counts.to(torch.int64)
                for index, record in enumerate(test)
                for counts in trainer.prepare_record(
                    record, config.feel.quantiser, rng.split(f"prepare{index}")
                ).counts
            ][: config.bench.slots]
        else:
            slots = trainer.random_slots(
                config.bench.slots, codebook.n, config.feel.ka_min, config.feel.ka_max,
                rng.split("slots"),
            )
        for snr in config.bench.snr_list:
            row = trainer.benchmark(slots, params, codebook, snr, mode, rng.split(f"snr{snr}"), seed)
            rows.append(asdict(row))
            logger.info("bench %s", asdict(row))
    target = out / "bench.csv"
    pd.DataFrame(rows).to_csv(target, index=False)
    print(f"{len(rows)} rows -> {target}")
    return settings.EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    """
    Entry point; returns the process exit code.

    Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 IO.
    """
    args = build_parser().parse_args(argv)
    try:
        settings.configure_logging(args.verbose)
        config = _apply_overrides(load_config(args.config), args)
        out = args.out or Path(config.output.dir)
        if not out.is_dir():
            raise FileNotFoundError(f"output directory {out} does not exist")
        threads = args.threads if args.threads is not None else settings.read_threads()
        if threads < 1:
            raise ConfigError(f"--threads must be positive, got {threads}")
        torch.set_num_threads(threads)
        write_resolved(config, out)
        return COMMANDS[args.command](args, config, out)
    except (ContainerError, OSError) as exc:
        logger.error("%s", exc)
        return settings.EXIT_IO
    except (NumericError, TapeError) as exc:
        logger.error("%s", exc)
        return settings.EXIT_NUMERIC
    except (ConfigError, PartitionError, CodewordIndexError, ValueError) as exc:
        logger.error("%s", exc)
        return settings.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
