"""Skeleton-sequence classifier for FIM independence: ST-GCN, BiLSTM and attention on numpy."""

__version__ = "0.1.0"
