"""Shared helpers for the test suite."""

import numpy as np


def rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Worst-coordinate error of `analytic` against `reference`, scaled by the
    reference magnitude (floored at 1 so near-zero gradients compare absolutely)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(reference))) if reference.size else 0.0)
    return float(np.max(np.abs(analytic - reference))) / denom if reference.size else 0.0


def brute_nll(logits: np.ndarray, targets, mask) -> float:
    """Independent per-token NLL: explicit log-sum-exp, summed one token at a time."""
    total = 0.0
    count = 0
    for t, (target, keep) in enumerate(zip(targets, mask)):
        if not keep:
            continue
        row = logits[t]
        m = row.max()
        log_z = m + np.log(np.exp(row - m).sum())
        total += -(row[target] - log_z)
        count += 1
    return total / count
