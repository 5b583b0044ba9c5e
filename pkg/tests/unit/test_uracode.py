"""
Unit tests for the URA codebook and activity vectors.
"""

import pytest
import torch

from airsum import numkernel, uracode
from airsum.numkernel import RngStream
from airsum.uracode import CodebookMode, UraCodebook
from core.exceptions import CodewordIndexError, NumericError, ShapeError


@pytest.mark.unit
class TestInitCodebook:
    """Test suite for init_codebook."""

    @pytest.mark.parametrize("mode", list(CodebookMode))
    def test_unit_rows(self, mode: CodebookMode, rng: RngStream) -> None:
        """Test every mode starts with unit-norm codewords and identity W."""
        cb = uracode.init_codebook(16, 8, mode, rng)

        assert cb.row_norm_error() < 1e-12
        assert torch.equal(cb.W.detach(), torch.eye(8, dtype=numkernel.DTYPE))

    def test_bernoulli_entries(self, rng: RngStream) -> None:
        """Test Bernoulli rows hold +-1/sqrt(l) after renormalisation."""
        cb = uracode.init_codebook(10, 4, CodebookMode.FIXED_BERNOULLI, rng)

        assert torch.allclose(cb.D.detach().abs(), torch.full((10, 4), 0.5, dtype=numkernel.DTYPE))

    def test_trainable_flags(self, rng: RngStream) -> None:
        """Test which matrices require gradients in each mode."""
        learned = uracode.init_codebook(4, 2, CodebookMode.LEARNED, rng)
        single = uracode.init_codebook(4, 2, CodebookMode.LEARNED_SINGLE, rng)
        fixed = uracode.init_codebook(4, 2, "fixed_gaussian", rng)

        assert (learned.D.requires_grad, learned.W.requires_grad) == (True, True)
        assert (single.D.requires_grad, single.W.requires_grad) == (True, False)
        assert (fixed.D.requires_grad, fixed.W.requires_grad) == (False, False)

    def test_same_seed_same_matrix(self) -> None:
        """Test two inits with one seed give the same C."""
        first = uracode.init_codebook(8, 4, CodebookMode.LEARNED, RngStream(2, "cb"))
        second = uracode.init_codebook(8, 4, CodebookMode.LEARNED, RngStream(2, "cb"))

        assert torch.equal(first.sensing_matrix(), second.sensing_matrix())

    def test_sensing_matrix_shape(self, ura_codebook: UraCodebook) -> None:
        """Test the sensing matrix is (l, n)."""
        assert ura_codebook.sensing_matrix().shape == (8, 16)

    def test_rejects_empty_shape(self, rng: RngStream) -> None:
        """Test n=0 raises ShapeError."""
        with pytest.raises(ShapeError):
            uracode.init_codebook(0, 4, CodebookMode.LEARNED, rng)

    def test_unknown_mode(self, rng: RngStream) -> None:
        """Test an unknown mode string raises ValueError."""
        with pytest.raises(ValueError):
            uracode.init_codebook(4, 2, "circulant", rng)


@pytest.mark.unit
class TestRenormalise:
    """Test suite for renormalise and the orthogonality penalty."""

    def test_restores_unit_rows(self) -> None:
        """Test rows of D W are rescaled to unit norm."""
        cb = UraCodebook(
            numkernel.as_tensor([[3, 4], [0, 2]]),
            numkernel.as_tensor([[1, 0], [0, 1]]),
            CodebookMode.LEARNED,
        )
        uracode.renormalise(cb)

        assert torch.allclose(cb.synthesis(), numkernel.as_tensor([[0.6, 0.8], [0.0, 1.0]]))

    def test_zero_row(self) -> None:
        """Test a zero codeword raises NumericError."""
        cb = UraCodebook(torch.zeros(2, 2, dtype=numkernel.DTYPE), torch.eye(2, dtype=numkernel.DTYPE), CodebookMode.LEARNED)

        with pytest.raises(NumericError):
            uracode.renormalise(cb)

    def test_penalty_zero_for_identity(self, ura_codebook: UraCodebook) -> None:
        """Test the penalty vanishes at initialisation."""
        assert float(uracode.orthogonality_penalty(ura_codebook)) == 0.0

    def test_penalty_hand_value(self) -> None:
        """Test W = 2I with l=4 gives four diagonal terms of (4 - 1)^2 = 36."""
        cb = UraCodebook(
            torch.eye(4, dtype=numkernel.DTYPE),
            2 * torch.eye(4, dtype=numkernel.DTYPE),
            CodebookMode.LEARNED,
        )

        assert float(uracode.orthogonality_penalty(cb)) == 36.0

    def test_mismatched_matrices(self) -> None:
        """Test W must be l x l."""
        with pytest.raises(ShapeError):
            UraCodebook(torch.zeros(4, 2, dtype=numkernel.DTYPE), torch.eye(3, dtype=numkernel.DTYPE), CodebookMode.LEARNED)


@pytest.mark.unit
class TestEncodeAndTransmit:
    """Test suite for activity vectors and noiseless superposition."""

    def test_encode_slot(self) -> None:
        """Test indices (3, 3, 7) count into n=8."""
        activity = uracode.encode_slot([3, 3, 7], 8)

        assert activity.counts.tolist() == [0, 0, 0, 2, 0, 0, 0, 1]
        assert activity.ka == 3

    def test_encode_empty_slot(self) -> None:
        """Test no indices give a zero vector with K_a = 0."""
        activity = uracode.encode_slot([], 4)

        assert activity.counts.tolist() == [0, 0, 0, 0]
        assert activity.ka == 0

    def test_counts_sum_to_list_length(self, rng: RngStream) -> None:
        """Test random index lists always sum to their length."""
        for _ in range(1000):
            size = numkernel.integers(rng, 0, 12)
            indices = [numkernel.integers(rng, 0, 9) for _ in range(size)]
            assert uracode.encode_slot(indices, 10).ka == size

    def test_single_count_returns_codeword(self, ura_codebook: UraCodebook) -> None:
        """Test one device on codeword j transmits column j."""
        y = uracode.transmit(uracode.encode_slot([5], 16), ura_codebook)

        assert torch.allclose(y, ura_codebook.sensing_matrix()[:, 5])

    def test_encode_slot_out_of_range(self) -> None:
        """Test an index equal to n raises CodewordIndexError."""
        with pytest.raises(CodewordIndexError):
            uracode.encode_slot([8], 8)

    def test_encode_slots(self) -> None:
        """Test each column of (K, J) indices becomes one slot."""
        counts = uracode.encode_slots(torch.tensor([[0, 1], [0, 2]]), 3)

        assert counts.tolist() == [[2, 0, 0], [0, 1, 1]]

    def test_transmit_is_count_weighted_sum(self) -> None:
        """Test C x equals the sum of chosen codewords with multiplicity."""
        cb = UraCodebook(
            numkernel.as_tensor([[1, 0], [0, 1], [0.6, 0.8]]),
            torch.eye(2, dtype=numkernel.DTYPE),
            CodebookMode.FIXED_GAUSSIAN,
        )
        y = uracode.transmit(uracode.encode_slot([0, 2, 2], 3), cb)

        assert torch.allclose(y, numkernel.as_tensor([2.2, 1.6]))

    def test_transmit_size_mismatch(self, ura_codebook: UraCodebook) -> None:
        """Test counts of the wrong length raise ShapeError."""
        with pytest.raises(ShapeError):
            uracode.transmit(torch.zeros(3, dtype=torch.int64), ura_codebook)

    def test_transmit_batch(self, ura_codebook: UraCodebook) -> None:
        """Test batched transmission matches row-by-row transmission."""
        counts = torch.zeros(2, 16, dtype=torch.int64)
        counts[0, 1], counts[1, 4] = 2, 1
        batch = uracode.transmit_batch(counts, ura_codebook.sensing_matrix())

        assert torch.allclose(batch[1], uracode.transmit(counts[1], ura_codebook))
