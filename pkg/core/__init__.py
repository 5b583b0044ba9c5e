"""
Core module for airsum.

This module contains the shared type aliases and the exception hierarchy
used across the package.
"""
