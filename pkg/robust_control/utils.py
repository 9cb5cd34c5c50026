"""Utility functions for the robust control toolkit."""

import logging
import functools
import time
from typing import Optional, Sequence

import numpy as np

from robust_control.exceptions import StructureError


def setup_logger(name: str, level: str = 'INFO') -> logging.Logger:
    """
    Set up a logger with proper formatting.

    Args:
        name: Logger name
        level: Logging level

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))

    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def log_execution_time(func):
    """Decorator to log function execution time."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        end_time = time.perf_counter()

        logger = logging.getLogger(func.__module__)
        logger.info(f"{func.__name__} executed in {end_time - start_time:.4f} seconds")

        return result
    return wrapper


def as_vector(value, length: Optional[int] = None, name: str = 'vector') -> np.ndarray:
    """
    Convert input to a 1-D float array and check its length.

    Args:
        value: Array-like input
        length: Expected length (unchecked when None)
        name: Name used in error messages

    Returns:
        1-D float array

    Raises:
        StructureError: If the shape or length is wrong
    """
    array = np.atleast_1d(np.asarray(value, dtype=float))
    if array.ndim != 1:
        raise StructureError(f"{name} must be one-dimensional, got shape {array.shape}")
    if length is not None and array.shape[0] != length:
        raise StructureError(f"{name} must have length {length}, got {array.shape[0]}")
    return array


def as_matrix(value, shape: Optional[Sequence[int]] = None, name: str = 'matrix') -> np.ndarray:
    """
    Convert input to a 2-D float array and check its shape.

    Args:
        value: Array-like input
        shape: Expected (rows, cols); a None entry is not checked
        name: Name used in error messages

    Returns:
        2-D float array

    Raises:
        StructureError: If the shape is wrong
    """
    array = np.asarray(value, dtype=float)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    if array.ndim != 2:
        raise StructureError(f"{name} must be two-dimensional, got shape {array.shape}")
    if shape is not None:
        for axis, expected in enumerate(shape):
            if expected is not None and array.shape[axis] != expected:
                raise StructureError(f"{name} must have shape {tuple(shape)}, got {array.shape}")
    return array


def positive_part(array: np.ndarray) -> np.ndarray:
    """Entrywise z+ = max(z, 0)."""
    return np.maximum(array, 0.0)


def negative_part(array: np.ndarray) -> np.ndarray:
    """Entrywise z- = z+ - z, so that z = z+ - z- with both parts non-negative."""
    return np.maximum(-array, 0.0)


def sign_patterns(dimension: int) -> np.ndarray:
    """
    All vectors of {-1, 1}^d, one per row, in lexicographic order.

    Args:
        dimension: d

    Returns:
        Array of shape (2**d, d)
    """
    if dimension == 0:
        return np.zeros((1, 0))
    grids = np.meshgrid(*([np.array([-1.0, 1.0])] * dimension), indexing='ij')
    return np.stack([grid.ravel() for grid in grids], axis=1)
