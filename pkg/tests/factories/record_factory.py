"""
Factory for RoundRecord test data generation.
"""

import factory

from airsum import numkernel
from airsum.numkernel import RngStream
from airsum.trainer import RoundRecord


class RoundRecordFactory(factory.Factory):
    """
    Round records with seeded Gaussian updates.

    Attributes:
        size: Model dimension W (factory parameter).
        ka: Active devices (factory parameter).

    Examples:
        >>> record = RoundRecordFactory(size=20, ka=3)
        >>> record.device_updates.shape
        torch.Size([3, 20])
        >>> records = RoundRecordFactory.create_batch(4)
        >>> [r.round_index for r in records][:2]
        [0, 1]
    """

    class Meta:
        """Factory configuration."""

        model = RoundRecord

    class Params:
        size = 32
        ka = 3

    round_index = factory.Sequence(lambda n: n)
    bs_update = factory.LazyAttribute(
        lambda o: 0.1 * numkernel.gauss(RngStream(o.round_index, "bs"), (o.size,))
    )
    device_updates = factory.LazyAttribute(
        lambda o: o.bs_update
        + 0.05 * numkernel.gauss(RngStream(o.round_index, "devices"), (o.ka, o.size))
    )
