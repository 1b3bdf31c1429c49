# Compiled hot loops.  Must stay bit-compatible with _kernels_py.py: same
# accumulation order, no FMA (setup.py passes -ffp-contract=off).
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sg_centered(const double[::1] x, const double[::1] coeffs):
    """out[p] = sum_k coeffs[k] * x[p + k], accumulated in k order."""
    cdef Py_ssize_t w = coeffs.shape[0]
    cdef Py_ssize_t n = x.shape[0] - w + 1
    cdef Py_ssize_t p, k
    cdef double acc
    if n <= 0:
        return np.empty(0)
    out = np.empty(n)
    cdef double[::1] o = out
    for p in range(n):
        acc = 0.0
        for k in range(w):
            acc = acc + coeffs[k] * x[p + k]
        o[p] = acc
    return out


def scan(const signed char[:, ::1] codes,
         const double[:, ::1] errors,
         const long long[::1] minutes,
         unsigned char[:, ::1] ring_high,
         unsigned char[:, ::1] ring_low,
         double[:, ::1] ring_err,
         long long[::1] count_high,
         long long[::1] count_low,
         long long[::1] counter,
         long long[::1] run_onset,
         unsigned char[::1] emitted,
         const double[::1] thresholds,
         long long persistence,
         long long pos,
         long long filled,
         Py_ssize_t start,
         trace_high=None,
         trace_low=None):
    """Advance the rolling rejection windows over ``codes[start:]``.

    Returns ``(next_index, pos, filled, fired)``; stops right after the first
    sample at which any sensor confirms an event (``fired`` lists them).
    """
    cdef Py_ssize_t T = codes.shape[0]
    cdef Py_ssize_t n = codes.shape[1]
    cdef long long W = ring_high.shape[1]
    cdef Py_ssize_t t, j
    cdef unsigned char nh, nl
    cdef signed char c
    cdef double dh, dl, d
    cdef long long minute
    cdef bint any_fired
    cdef bint tracing = trace_high is not None
    cdef double[:, ::1] th
    cdef double[:, ::1] tl
    if tracing:
        th = trace_high
        tl = trace_low
    fired = []
    for t in range(start, T):
        minute = minutes[t]
        for j in range(n):
            c = codes[t, j]
            nh = 1 if c == 1 else 0
            nl = 1 if c == -1 else 0
            count_high[j] += nh - ring_high[j, pos]
            count_low[j] += nl - ring_low[j, pos]
            ring_high[j, pos] = nh
            ring_low[j, pos] = nl
            ring_err[j, pos] = errors[t, j]
        pos += 1
        if pos == W:
            pos = 0
        if filled < W:
            filled += 1
        any_fired = False
        for j in range(n):
            dh = <double>count_high[j] / <double>W
            dl = <double>count_low[j] / <double>W
            if tracing:
                th[t, j] = dh
                tl[t, j] = dl
            if filled < W:
                continue
            d = dh if dh >= dl else dl
            if d >= thresholds[j]:
                if counter[j] == 0:
                    run_onset[j] = minute
                counter[j] += 1
                if emitted[j] == 0 and minute - run_onset[j] >= persistence:
                    emitted[j] = 1
                    fired.append(j)
                    any_fired = True
            else:
                counter[j] = 0
                emitted[j] = 0
        if any_fired:
            return t + 1, pos, filled, fired
    return T, pos, filled, fired
