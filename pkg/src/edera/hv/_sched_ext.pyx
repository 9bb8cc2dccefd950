# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled proportional-share kernel. Same contract as ``_sched_py``."""

from libc.stdlib cimport malloc, free


def share_ticks(weights, long long slots):
    cdef Py_ssize_t n = len(weights)
    if n == 0 or slots <= 0:
        return [0] * n
    cdef long long *w = <long long *> malloc(n * sizeof(long long))
    cdef long long *credit = <long long *> malloc(n * sizeof(long long))
    cdef long long *ticks = <long long *> malloc(n * sizeof(long long))
    if w == NULL or credit == NULL or ticks == NULL:
        free(w); free(credit); free(ticks)
        raise MemoryError()
    cdef long long total = 0
    cdef Py_ssize_t i, best
    cdef long long s, c, best_credit
    try:
        for i in range(n):
            w[i] = weights[i]
            total += w[i]
            credit[i] = 0
            ticks[i] = 0
        for s in range(slots):
            best = 0
            credit[0] += w[0]
            best_credit = credit[0]
            for i in range(1, n):
                c = credit[i] + w[i]
                credit[i] = c
                if c > best_credit:
                    best_credit = c
                    best = i
            credit[best] -= total
            ticks[best] += 1
        return [ticks[i] for i in range(n)]
    finally:
        free(w)
        free(credit)
        free(ticks)
