"""Compiled inner loops for segment tracing and integration.

All kernels release the GIL so chunks can run on separate threads.
Power distances are handled through ``lift[i] = |x_i|^2 - phi_i``; the
``|y|^2`` term is common to all sites and never formed.
"""
import math

import numpy as np
from numba import njit

# Gauss-Legendre, 2 points on [-1, 1]
_GL_NODE = 1.0 / math.sqrt(3.0)

STATUS_OK = 0
STATUS_OVERFLOW = -1
STATUS_STALL = -2


@njit(cache=True, nogil=True)
def next_crossing(X, lift, P0, D, j, prev, t_now, indptr, indices, brute, hidden):
    """Next cell entered by ``P0 + t D`` after ``t_now`` while in cell ``j``.

    Returns ``(k, t)``; ``k == -1`` means the segment ends in ``j``.
    Minimal ``t`` wins, ties go to the largest slope then smallest index.
    A hidden cell can only be entered at a tie, and its borrowed neighbour
    list may miss the way out, so all sites are scanned from there.
    """
    n, d = X.shape
    best_k = -1
    best_t = np.inf
    best_slope = 0.0
    brute = brute or hidden[j]
    if brute:
        count = n
    else:
        count = indptr[j + 1] - indptr[j]
    for c in range(count):
        if brute:
            m = c
        else:
            m = indices[indptr[j] + c]
        if m == j or m == prev:
            continue
        num = lift[m] - lift[j]
        slope = 0.0
        for q in range(d):
            diff = X[j, q] - X[m, q]
            num += 2.0 * P0[q] * diff
            slope -= 2.0 * D[q] * diff
        # only cells gaining along the segment can be entered
        if slope <= 1e-14 * abs(num):
            continue
        t = num / slope
        if t > 1.0:
            continue
        if t < t_now:
            t = t_now
        if t < best_t or (t == best_t and (slope > best_slope or
                                           (slope == best_slope and m < best_k))):
            best_k = m
            best_t = t
            best_slope = slope
    return best_k, best_t


@njit(cache=True, nogil=True)
def _walk_to(X, lift, start, target, indptr, indices, brute, hidden, max_steps):
    """Cell containing ``target`` found by walking from site ``start``."""
    d = X.shape[1]
    P0 = X[start].copy()
    D = np.empty(d)
    for q in range(d):
        D[q] = target[q] - P0[q]
    j = start
    prev = -1
    t = 0.0
    for _ in range(max_steps):
        k, tk = next_crossing(X, lift, P0, D, j, prev, t, indptr, indices, brute, hidden)
        if k < 0:
            return j
        prev = j
        j = k
        t = tk
    return -1


@njit(cache=True, nogil=True)
def trace_chunk(X, lift, phi, V, rho, traced, seg_lo, seg_hi, start_site,
                indptr, indices, brute, hidden, out_seg, out_cell, out_ts, out_te, out_cost):
    """Trace segments ``seg_lo .. seg_hi - 1`` and integrate on the fly.

    The first traced segment of the chunk, and any segment following an
    untraced one, locates its start by a walk from ``start_site`` (the site
    with maximal weight, always inside its own cell).

    Returns the number of entries written, or a negative status.
    """
    n, d = X.shape
    cap = out_seg.shape[0]
    max_steps = n + 8
    P0 = np.empty(d)
    D = np.empty(d)
    count = 0
    cell = -1
    for a in range(seg_lo, seg_hi):
        if not traced[a]:
            cell = -1
            continue
        for q in range(d):
            P0[q] = V[a, q]
            D[q] = V[a + 1, q] - V[a, q]
        if cell < 0:
            cell = _walk_to(X, lift, start_site, P0, indptr, indices, brute, hidden, max_steps)
            if cell < 0:
                return STATUS_STALL
        t = 0.0
        prev = -1
        steps = 0
        while True:
            k, tk = next_crossing(X, lift, P0, D, cell, prev, t, indptr, indices, brute, hidden)
            te = 1.0 if k < 0 else tk
            if count >= cap:
                return STATUS_OVERFLOW
            out_seg[count] = a
            out_cell[count] = cell
            out_ts[count] = t
            out_te[count] = te
            # rho * integral of |P0 + s D - x|^2 - phi over [t, te]
            half = 0.5 * (te - t)
            mid = 0.5 * (te + t)
            acc = 0.0
            for node in (mid - half * _GL_NODE, mid + half * _GL_NODE):
                r2 = 0.0
                for q in range(d):
                    diff = P0[q] + node * D[q] - X[cell, q]
                    r2 += diff * diff
                acc += half * (r2 - phi[cell])
            out_cost[count] = rho[a] * acc
            count += 1
            if k < 0:
                break
            prev = cell
            cell = k
            t = tk
            steps += 1
            if steps > max_steps:
                return STATUS_STALL
    return count
