"""Binary state-sequence smoothing and run extraction.

Two smoothers are provided: a trailing moving average (MVA) that suppresses
single-minute bursts, and block aggregation (AGG) that sums states over
fixed blocks and smooths the block sums with a Savitzky-Golay filter before
thresholding. Both return binary sequences of the original length.
"""

from __future__ import annotations

import numpy as np

from .errors import WindowTooLarge


def savgol_coeffs(window: int, degree: int, pos: int | None = None) -> np.ndarray:
    """Least-squares polynomial smoothing weights for one output position.

    Fits a degree-``degree`` polynomial to ``window`` consecutive samples and
    returns the weights that evaluate the fit at offset ``pos`` (default:
    window center). Weights are ordered for a dot product with the samples.
    """
    if window < 1 or window % 2 == 0:
        raise WindowTooLarge(f"window must be odd and positive, got {window}")
    if degree >= window:
        raise WindowTooLarge(f"degree {degree} needs window > degree, got {window}")
    half = window // 2
    if pos is None:
        pos = half
    if not 0 <= pos < window:
        raise WindowTooLarge(f"pos {pos} outside window of length {window}")
    # Vandermonde system centered on the evaluation position: the weight
    # vector is the first row of the pseudo-inverse of the design matrix.
    x = np.arange(window, dtype=float) - pos
    design = np.vander(x, degree + 1, increasing=True)
    rhs = np.zeros(degree + 1)
    rhs[0] = 1.0
    coeffs, *_ = np.linalg.lstsq(design.T, rhs, rcond=None)
    return coeffs


def savgol_smooth(values: np.ndarray, window: int, degree: int) -> np.ndarray:
    """Savitzky-Golay smoothing with polynomial-fit edge handling.

    Interior points use the symmetric center weights; points within half a
    window of either edge are evaluated from the polynomial fitted to the
    first/last full window, so polynomials up to ``degree`` reproduce exactly.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds sequence length {n}")
    half = window // 2
    out = np.empty(n)
    center = savgol_coeffs(window, degree)
    for t in range(half, n - half):
        out[t] = center @ values[t - half : t + half + 1]
    for t in range(min(half, n)):
        out[t] = savgol_coeffs(window, degree, pos=t) @ values[:window]
    for t in range(max(n - half, 0), n):
        pos = window - (n - t)
        out[t] = savgol_coeffs(window, degree, pos=pos) @ values[n - window :]
    return out


def mva_smooth(states: np.ndarray, window: int = 5) -> np.ndarray:
    """Trailing moving-average smoothing of a binary state sequence.

    The average at t covers the last ``window`` states ending at t (shorter
    prefix windows use whatever history exists); the smoothed state is 1 iff
    the average is at least 0.5.
    """
    states = np.asarray(states)
    if window < 1:
        raise WindowTooLarge(f"window must be >= 1, got {window}")
    n = states.shape[0]
    csum = np.concatenate(([0], np.cumsum(states, dtype=np.int64)))
    t = np.arange(1, n + 1)
    lo = np.maximum(t - window, 0)
    means = (csum[t] - csum[lo]) / (t - lo)
    return (means >= 0.5).astype(np.uint8)


def agg_smooth(
    states: np.ndarray,
    agg_window: int = 30,
    sg_window: int = 5,
    sg_degree: int = 2,
) -> np.ndarray:
    """Block-sum aggregation smoothed with a Savitzky-Golay filter.

    States are summed over consecutive ``agg_window``-minute blocks, the
    block sums are SG-smoothed, each block is thresholded at half its size,
    and the block decisions are expanded back to per-minute resolution.
    """
    states = np.asarray(states)
    if agg_window < 1:
        raise WindowTooLarge(f"agg_window must be >= 1, got {agg_window}")
    if sg_window % 2 == 0 or sg_degree >= sg_window:
        raise WindowTooLarge("sg_window must be odd and greater than sg_degree")
    n = states.shape[0]
    n_blocks = (n + agg_window - 1) // agg_window
    if sg_window > n_blocks:
        raise WindowTooLarge(
            f"sg_window {sg_window} exceeds block count {n_blocks}"
        )
    sums = np.zeros(n_blocks)
    sizes = np.zeros(n_blocks)
    for b in range(n_blocks):
        chunk = states[b * agg_window : (b + 1) * agg_window]
        sums[b] = chunk.sum()
        sizes[b] = chunk.shape[0]
    smoothed = savgol_smooth(sums, sg_window, sg_degree)
    block_state = (smoothed >= sizes / 2.0).astype(np.uint8)
    return np.repeat(block_state, agg_window)[:n]


def longest_run(states: np.ndarray) -> tuple[int, int] | None:
    """Start and end index (inclusive) of the longest run of 1s.

    Ties break toward the earliest start; returns None when no 1s exist.
    """
    best_len = 0
    best = None
    run_start = None
    for i, s in enumerate(np.asarray(states)):
        if s:
            if run_start is None:
                run_start = i
        else:
            if run_start is not None:
                if i - run_start > best_len:
                    best_len = i - run_start
                    best = (run_start, i - 1)
                run_start = None
    if run_start is not None:
        n = len(states)
        if n - run_start > best_len:
            best = (run_start, n - 1)
    return best
