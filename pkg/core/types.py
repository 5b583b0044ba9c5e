"""
Custom type aliases for airsum.

This module defines the type aliases used throughout the package
for better type safety and code documentation.
"""

from pathlib import Path
from typing import Any, Union

import torch

# Generic type aliases
JSONDict = dict[str, Any]

# Numerics
Tensor = torch.Tensor
Shape = tuple[int, ...]
TensorMap = dict[str, torch.Tensor]

# Filesystem
PathLike = Union[str, Path]

# Metric rows written to CSV
MetricRow = dict[str, Union[int, float, str]]
