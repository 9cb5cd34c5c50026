"""Robust-adaptive MPC toolkit: confidence-set estimation, interval prediction and maximin tree planning."""
