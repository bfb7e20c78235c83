"""
Few-shot anomaly detection engine: feature providers, prompt learning,
region aggregation, scoring and evaluation.
"""

from .constants import ErrorCode

__all__ = ['ErrorCode']
