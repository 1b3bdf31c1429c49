"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both implementations perform the same floating-point operations in the same
order, so their outputs are bit-identical.
"""
import numpy as np


def sg_centered(x, coeffs):
    x = np.ascontiguousarray(x, dtype=float)
    w = len(coeffs)
    n = len(x) - w + 1
    if n <= 0:
        return np.empty(0)
    acc = np.zeros(n)
    for k in range(w):
        acc += coeffs[k] * x[k:k + n]
    return acc


def scan(codes, errors, minutes, ring_high, ring_low, ring_err, count_high, count_low,
         counter, run_onset, emitted, thresholds, persistence, pos, filled, start,
         trace_high=None, trace_low=None):
    T = codes.shape[0]
    W = ring_high.shape[1]
    Wf = float(W)
    for t in range(start, T):
        minute = int(minutes[t])
        c = codes[t]
        nh = (c == 1).astype(np.uint8)
        nl = (c == -1).astype(np.uint8)
        count_high += nh.astype(np.int64) - ring_high[:, pos]
        count_low += nl.astype(np.int64) - ring_low[:, pos]
        ring_high[:, pos] = nh
        ring_low[:, pos] = nl
        ring_err[:, pos] = errors[t]
        pos += 1
        if pos == W:
            pos = 0
        if filled < W:
            filled += 1
        dh = count_high / Wf
        dl = count_low / Wf
        if trace_high is not None:
            trace_high[t] = dh
            trace_low[t] = dl
        if filled < W:
            continue
        over = np.maximum(dh, dl) >= thresholds
        run_onset[over & (counter == 0)] = minute
        counter[over] += 1
        counter[~over] = 0
        emitted[~over] = 0
        fire = over & (emitted == 0) & (minute - run_onset >= persistence)
        if fire.any():
            emitted[fire] = 1
            return t + 1, pos, filled, [int(j) for j in np.nonzero(fire)[0]]
    return T, pos, filled, []
