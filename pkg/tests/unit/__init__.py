"""
Unit tests package for Django Financial API.

Contains isolated unit tests for models, serializers, and utilities.
"""
