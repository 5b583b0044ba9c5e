"""
Unit tests for the federated edge learning loop.

Tests the synthetic task, device partitioning, local training, the uplink
variants and the round loop.
"""

from pathlib import Path

import pandas as pd
import pytest
import torch
from pytest_mock import MockerFixture

from airsum import feelsim, numkernel, uracode, vq
from airsum.decoder import DecoderConfig, DecoderMode, DecoderParams
from airsum.feelsim import GlobalModel
from airsum.numkernel import RngStream
from airsum.serializers import FeelConfig
from airsum.uracode import CodebookMode
from core.exceptions import ConfigError, DivergenceError, NumericError, PartitionError
from tests.factories import FeelConfigFactory, TaskConfigFactory, UplinkConfigFactory


@pytest.fixture
def digital_config() -> FeelConfig:
    """Digital OTA run with the fixed decoder at 20 dB."""
    return FeelConfigFactory(seed=0, rounds=2, uplink=UplinkConfigFactory(kind="digital_ota", mode=DecoderMode.FIXED))


@pytest.fixture
def digital_link_parts() -> tuple[uracode.UraCodebook, DecoderParams]:
    """URA codebook and fixed decoder sized for the n=8 test quantiser."""
    codebook = uracode.init_codebook(8, 6, CodebookMode.FIXED_GAUSSIAN, RngStream(3, "codebook"))
    params = DecoderParams(DecoderConfig(n=8, l=6, layers=2, prior_ka_mean=2.5, filters=4), DecoderMode.FIXED)
    return codebook, params


@pytest.mark.unit
class TestTask:
    """Test suite for the synthetic task and model."""

    def test_task_shapes(self, rng: RngStream) -> None:
        """Test sample counts and feature dimension."""
        data = feelsim.make_task_data(TaskConfigFactory(), rng)

        assert data.train_x.shape == (120, 4)
        assert data.test_y.shape == (60,)
        assert data.bs_x.shape == (40, 4)
        assert set(data.train_y.tolist()) == {0, 1, 2}

    def test_task_is_deterministic(self) -> None:
        """Test one seed gives one data set."""
        first = feelsim.make_task_data(TaskConfigFactory(), RngStream(2, "data"))
        second = feelsim.make_task_data(TaskConfigFactory(), RngStream(2, "data"))

        assert torch.equal(first.train_x, second.train_x)

    def test_model_size(self, rng: RngStream) -> None:
        """Test 4-8-3 perceptron has 67 parameters."""
        model = GlobalModel.build(TaskConfigFactory(), rng)

        assert model.size == 4 * 8 + 8 + 8 * 3 + 3
        assert model.vector().dtype == numkernel.DTYPE

    def test_load_rejects_nan(self, rng: RngStream) -> None:
        """Test loading a non-finite vector raises NumericError."""
        model = GlobalModel.build(TaskConfigFactory(), rng)

        with pytest.raises(NumericError):
            model.load(torch.full((model.size,), float("nan"), dtype=numkernel.DTYPE))


@pytest.mark.unit
class TestPartition:
    """Test suite for partition_data."""

    def test_every_sample_once(self, rng: RngStream) -> None:
        """Test the shards cover every index exactly once with equal sizes."""
        labels = torch.arange(120) % 3
        shards = feelsim.partition_data(labels, 4, 0.2, rng)

        assert sorted(torch.cat(shards).tolist()) == list(range(120))
        assert [s.numel() for s in shards] == [30, 30, 30, 30]

    @pytest.mark.parametrize(("total", "devices", "iid_fraction"), [(103, 4, 0.3), (57, 5, 0.9), (10, 10, 0.0)])
    def test_sizes_differ_by_one(self, rng: RngStream, total: int, devices: int, iid_fraction: float) -> None:
        """Test uneven splits keep device sizes within one of each other."""
        sizes = [s.numel() for s in feelsim.partition_data(torch.arange(total) % 3, devices, iid_fraction, rng)]

        assert sum(sizes) == total
        assert max(sizes) - min(sizes) <= 1

    def test_non_iid_shards(self, rng: RngStream) -> None:
        """Test label-sorted shards hold at most two labels each."""
        labels = torch.arange(120) % 3
        shards = feelsim.partition_data(labels, 4, 0.0, rng)

        assert all(len(set(labels[s].tolist())) <= 2 for s in shards)

    def test_too_few_samples(self, rng: RngStream) -> None:
        """Test fewer samples than devices raises PartitionError."""
        with pytest.raises(PartitionError):
            feelsim.partition_data(torch.arange(3), 4, 0.5, rng)


@pytest.mark.unit
class TestLocalTraining:
    """Test suite for local training and corruption."""

    def test_update_and_restore(self, rng: RngStream) -> None:
        """Test the update is non-zero and the global model is restored."""
        task = TaskConfigFactory()
        data = feelsim.make_task_data(task, rng.split("data"))
        model = GlobalModel.build(task, rng.split("model"))
        start = model.vector()
        update = feelsim.local_train(model, data.bs_x, data.bs_y, 1, 0.1, 16, rng.split("sgd"))

        assert update.shape == (model.size,)
        assert float(update.norm()) > 0.0
        assert torch.equal(model.vector(), start)

    def test_zero_learning_rate(self, rng: RngStream) -> None:
        """Test lr=0 leaves the model where it was."""
        task = TaskConfigFactory()
        data = feelsim.make_task_data(task, rng.split("data"))
        model = GlobalModel.build(task, rng.split("model"))

        assert float(feelsim.local_train(model, data.bs_x, data.bs_y, 2, 0.0, 8, rng).abs().max()) == 0.0

    def test_single_sample_linear_step(self, rng: RngStream) -> None:
        """Test one sample on a linear model moves by -lr times the softmax gradient."""
        task = TaskConfigFactory(hidden=[])
        model = GlobalModel.build(task, rng.split("model"))
        weight, bias = model.network[0].weight.detach().clone(), model.network[0].bias.detach().clone()
        x = numkernel.gauss(rng.split("x"), (1, 4))
        y = torch.tensor([2])
        update = feelsim.local_train(model, x, y, 1, 0.5, 1, rng.split("sgd"))

        residual = torch.softmax(x[0] @ weight.T + bias, dim=0) - torch.nn.functional.one_hot(y[0], 3)
        expected = -0.5 * torch.cat([torch.outer(residual, x[0]).flatten(), residual])
        assert torch.allclose(update, expected, atol=1e-12)

    def test_zero_epochs(self, rng: RngStream) -> None:
        """Test local training needs at least one epoch."""
        task = TaskConfigFactory()
        data = feelsim.make_task_data(task, rng)

        with pytest.raises(ValueError):
            feelsim.local_train(GlobalModel.build(task, rng), data.bs_x, data.bs_y, 0, 0.1, 16, rng)

    @pytest.mark.parametrize(("fraction", "ka", "expected"), [(0.25, 4, 1), (0.5, 3, 2), (0.0, 5, 0), (0.2, 10, 2)])
    def test_corrupted_count(self, fraction: float, ka: int, expected: int) -> None:
        """Test the corrupted share rounds half up."""
        assert feelsim.corrupted_count(fraction, ka) == expected

    def test_corrupt_norm(self) -> None:
        """Test the replacement has roughly the requested norm."""
        noise = feelsim.corrupt(torch.zeros(40_000, dtype=numkernel.DTYPE), 3.0, RngStream(8, "corrupt"))

        assert float(noise.norm()) == pytest.approx(3.0, rel=0.02)

    def test_corrupt_uncorrelated_with_update(self) -> None:
        """Test replacements show no correlation with the honest update over repeated draws."""
        update = numkernel.gauss(RngStream(8, "update"), (1_000,))
        stream = RngStream(8, "corrupt")
        cosines = numkernel.as_tensor(
            [
                float(torch.dot(noise, update) / (noise.norm() * update.norm()))
                for noise in (feelsim.corrupt(update, 3.0, stream.split(f"draw{k}")) for k in range(200))
            ]
        )

        assert abs(float(cosines.mean())) < 0.015
        assert float(cosines.abs().max()) < 0.2


@pytest.mark.unit
class TestMetrics:
    """Test suite for recovery metrics."""

    def test_recovery_accuracy(self) -> None:
        """Test one misplaced device out of two scores 0."""
        assert feelsim.recovery_accuracy(torch.tensor([1, 1, 0]), torch.tensor([1, 0, 1])) == 0.0
        assert feelsim.recovery_accuracy(torch.tensor([2, 1]), torch.tensor([2, 1])) == 1.0

    def test_recovery_accuracy_zero_truth(self) -> None:
        """Test an empty ground truth raises NumericError."""
        with pytest.raises(NumericError):
            feelsim.recovery_accuracy(torch.tensor([0, 0]), torch.tensor([1, 0]))

    def test_mae(self) -> None:
        """Test mean absolute error of (3, 2) against (2.5, 3)."""
        assert feelsim.mae([3.0, 2.0], [2.5, 3.0]) == pytest.approx(0.75)
        assert feelsim.mae([10, 8], [10.4, 7.9]) == pytest.approx(0.25)


@pytest.mark.unit
class TestSend:
    """Test suite for the uplink variants."""

    def test_perfect_is_exact_mean(self, rng: RngStream) -> None:
        """Test the perfect uplink averages exactly and quantises nothing."""
        updates = numkernel.gauss(rng, (3, 10))
        result = feelsim.send(updates, None, FeelConfigFactory(), None, rng)

        assert torch.equal(result.aggregate, updates.mean(dim=0))
        assert torch.equal(result.dequantised, updates)
        assert (result.ka_hat, result.recovery_acc) == (3.0, 1.0)

    def test_quantised_mean_averages_centroids(self, rng: RngStream) -> None:
        """Test the quantised uplink averages the de-quantised updates."""
        updates = numkernel.gauss(rng, (3, 10))
        cb = vq.build_codebook(vq.fragment(numkernel.gauss(rng, (10,)), 4), 3, None, rng.split("cb"))
        config = FeelConfigFactory(uplink=UplinkConfigFactory(kind="quantised"))
        result = feelsim.send(updates, cb, config, None, rng)

        assert torch.allclose(result.aggregate, result.dequantised.mean(dim=0), atol=1e-12)


@pytest.mark.unit
class TestRun:
    """Test suite for the FEEL round loop."""

    def test_perfect_run(self, feel_config: FeelConfig) -> None:
        """Test one metric row per round with the expected labels."""
        result = feelsim.run(feel_config)
        frame = result.frame()

        assert list(frame.columns) == feelsim.METRIC_COLUMNS
        assert frame["round"].tolist() == [0, 1, 2]
        assert set(frame["mode"]) == {"perfect"}
        assert frame["ka_true"].between(2, 3).all()
        assert frame["mae_running"].tolist() == [0.0, 0.0, 0.0]

    def test_run_is_deterministic(self, feel_config: FeelConfig) -> None:
        """Test identical configs give identical final parameters."""
        assert torch.equal(feelsim.run(feel_config).final_parameters, feelsim.run(feel_config).final_parameters)

    def test_record_hook(self, feel_config: FeelConfig) -> None:
        """Test the hook sees every round's BS and device updates."""
        seen: list[tuple[int, int]] = []
        feelsim.run(feel_config, record_hook=lambda t, bs, devices: seen.append((t, devices.shape[0])))

        assert [t for t, _ in seen] == [0, 1, 2]
        assert all(2 <= k <= 3 for _, k in seen)

    def test_quantised_with_bs_participant(self) -> None:
        """Test the BS counts as one more participant when included."""
        config = FeelConfigFactory(include_bs=True, uplink=UplinkConfigFactory(kind="quantised", rule="majority"))
        frame = feelsim.run(config).frame()

        assert frame["ka_true"].between(3, 4).all()
        assert set(frame["rule"]) == {"majority"}

    def test_error_feedback_warning(self, mocker: MockerFixture) -> None:
        """Test a residual above the ratio times the update norm warns."""
        warning = mocker.patch.object(feelsim.logger, "warning")
        config = FeelConfigFactory(ef_warning_ratio=1e-9, uplink=UplinkConfigFactory(kind="quantised"))
        feelsim.run(config)

        assert warning.called

    def test_digital_run(
        self,
        digital_config: FeelConfig,
        digital_link_parts: tuple[uracode.UraCodebook, DecoderParams],
    ) -> None:
        """Test the digital uplink reports decoder metrics."""
        codebook, params = digital_link_parts
        frame = feelsim.run(digital_config, codebook=codebook, params=params).frame()

        assert set(frame["mode"]) == {"fixed"}
        assert (frame["recovery_acc"] <= 1.0).all()
        assert frame["snr_db"].tolist() == [20.0, 20.0]

    def test_digital_needs_codebook(self, digital_config: FeelConfig) -> None:
        """Test digital_ota without a codebook raises ConfigError."""
        with pytest.raises(ConfigError):
            feelsim.run(digital_config)

    def test_digital_size_mismatch(self, digital_config: FeelConfig) -> None:
        """Test the URA codebook must have one codeword per centroid."""
        codebook = uracode.init_codebook(16, 6, CodebookMode.FIXED_GAUSSIAN, RngStream(0))
        params = DecoderParams(DecoderConfig(n=16, l=6, layers=1, prior_ka_mean=2.5), DecoderMode.FIXED)

        with pytest.raises(ConfigError):
            feelsim.run(digital_config, codebook=codebook, params=params)

    def test_divergence_keeps_metrics(self, mocker: MockerFixture, feel_config: FeelConfig) -> None:
        """Test a failing local step raises DivergenceError with the metrics so far."""
        mocker.patch.object(feelsim, "local_train", side_effect=NumericError("local training loss is not finite"))

        with pytest.raises(DivergenceError) as excinfo:
            feelsim.run(feel_config)
        assert excinfo.value.metrics == []

    def test_write_metrics(self, feel_config: FeelConfig, out_dir: Path) -> None:
        """Test the metrics CSV carries the fixed column set."""
        path = out_dir / "metrics.csv"
        feelsim.write_metrics(feelsim.run(feel_config).metrics, path)

        assert list(pd.read_csv(path).columns) == feelsim.METRIC_COLUMNS
