# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled isolation-tree traversal (hot path of forest scoring)."""
import numpy as np

BACKEND = "cython"


def tree_path_lengths(double[:, ::1] x, int[::1] feature, double[::1] threshold,
                      int[::1] left, int[::1] right, double[::1] adjust,
                      int[::1] roots):
    """Per-row, per-tree path lengths; see the numpy fallback for semantics."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_trees = roots.shape[0]
    out = np.empty((n, n_trees), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    cdef Py_ssize_t i, t
    cdef int node
    cdef long depth
    with nogil:
        for i in range(n):
            for t in range(n_trees):
                node = roots[t]
                depth = 0
                while feature[node] >= 0:
                    if x[i, feature[node]] < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                    depth += 1
                out_v[i, t] = depth + adjust[node]
    return out
