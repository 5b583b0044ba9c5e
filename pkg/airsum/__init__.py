"""
airsum: learned digital over-the-air aggregation for federated edge learning.
"""

__version__ = "1.0.0"
