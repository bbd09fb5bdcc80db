"""Seeding and logging helpers shared across modules."""

from __future__ import annotations

import logging
import zlib

import numpy as np

__all__ = ["derive_rng", "tag_int", "get_logger"]


def tag_int(tag):
    """Stable 32-bit integer for a string tag (seed derivation)."""
    return zlib.crc32(tag.encode())


def derive_rng(seed, tag, *indices):
    """Counter-based RNG: independent stream per (seed, tag, indices).

    Training never draws from one sequential stream, so resuming at an
    epoch boundary reproduces the exact randomness of an uninterrupted run.
    """
    key = [int(seed) & 0xFFFFFFFF, tag_int(tag)] + [int(i) & 0xFFFFFFFF for i in indices]
    return np.random.default_rng(key)


def get_logger(name):
    logger = logging.getLogger(name)
    if not logging.getLogger().handlers and not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    return logger
