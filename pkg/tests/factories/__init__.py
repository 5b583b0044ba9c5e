"""
Test data factories using factory_boy.
"""

from tests.factories.config_factory import (
    ExperimentConfigFactory,
    FeelConfigFactory,
    QuantiserConfigFactory,
    TaskConfigFactory,
    TrainConfigFactory,
    UplinkConfigFactory,
)
from tests.factories.record_factory import RoundRecordFactory

__all__ = [
    "ExperimentConfigFactory",
    "FeelConfigFactory",
    "QuantiserConfigFactory",
    "RoundRecordFactory",
    "TaskConfigFactory",
    "TrainConfigFactory",
    "UplinkConfigFactory",
]
