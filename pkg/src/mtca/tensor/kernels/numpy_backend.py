"""Pure-numpy implementations of the hot kernels.

Semantics here are the reference contract; the compiled backend in
``_ckernels.pyx`` must match it (tests assert parity).  All arrays are
C-contiguous float64; masks are uint8 row-validity flags.
"""

import numpy as np

NAME = "python"


def conv1d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-length 1-D cross-correlation over the sequence axis.

    x: (L, C_in), w: (K, C_in, C_out) with K odd.  Positions outside the
    sequence contribute zero.  Returns (L, C_out).
    """
    length = x.shape[0]
    taps, c_in, c_out = w.shape
    pad = (taps - 1) // 2
    xpad = np.zeros((length + 2 * pad, c_in), dtype=np.float64)
    xpad[pad : pad + length] = x
    out = np.zeros((length, c_out), dtype=np.float64)
    for k in range(taps):
        out += xpad[k : k + length] @ w[k]
    return out


def conv1d_backward(x, w, grad_out):
    """Gradients of conv1d_forward w.r.t. input and kernel."""
    length = x.shape[0]
    taps, c_in, c_out = w.shape
    pad = (taps - 1) // 2
    xpad = np.zeros((length + 2 * pad, c_in), dtype=np.float64)
    xpad[pad : pad + length] = x
    gxpad = np.zeros_like(xpad)
    gw = np.zeros_like(w)
    for k in range(taps):
        gxpad[k : k + length] += grad_out @ w[k].T
        gw[k] = xpad[k : k + length].T @ grad_out
    return gxpad[pad : pad + length], gw


def maxpool2_forward(x: np.ndarray, mask: np.ndarray):
    """Stride-2 max over the sequence axis, skipping masked rows.

    Ties resolve to the lower row index.  A window with no valid row
    yields zeros and an invalid output position (argmax index -1).
    Returns (out, argmax_rows, out_mask).
    """
    length, channels = x.shape
    out_len = (length + 1) // 2
    out = np.zeros((out_len, channels), dtype=np.float64)
    arg = np.full((out_len, channels), -1, dtype=np.int64)
    out_mask = np.zeros(out_len, dtype=np.uint8)
    for j in range(out_len):
        rows = [r for r in (2 * j, 2 * j + 1) if r < length and mask[r]]
        if not rows:
            continue
        out_mask[j] = 1
        window = x[rows]
        pick = np.argmax(window, axis=0)
        out[j] = window[pick, np.arange(channels)]
        arg[j] = np.asarray(rows, dtype=np.int64)[pick]
    return out, arg, out_mask


def maxpool2_backward(grad_out, arg, length):
    """Routes each output gradient to its argmax row."""
    out_len, channels = grad_out.shape
    gx = np.zeros((length, channels), dtype=np.float64)
    for j in range(out_len):
        for c in range(channels):
            r = arg[j, c]
            if r >= 0:
                gx[r, c] += grad_out[j, c]
    return gx
