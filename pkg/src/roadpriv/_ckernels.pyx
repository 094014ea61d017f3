# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph kernels; same contracts as roadpriv._pykernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline bint _less(double da, long a, double db, long b) nogil:
    return da < db or (da == db and a < b)


cdef void _sift_up(double[::1] hd, long[::1] hn, Py_ssize_t pos) nogil:
    cdef double d = hd[pos]
    cdef long v = hn[pos]
    cdef Py_ssize_t parent
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(d, v, hd[parent], hn[parent]):
            hd[pos] = hd[parent]
            hn[pos] = hn[parent]
            pos = parent
        else:
            break
    hd[pos] = d
    hn[pos] = v


cdef void _sift_down(double[::1] hd, long[::1] hn, Py_ssize_t size) nogil:
    cdef Py_ssize_t pos = 0, child
    cdef double d = hd[0]
    cdef long v = hn[0]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _less(hd[child + 1], hn[child + 1], hd[child], hn[child]):
            child += 1
        if _less(hd[child], hn[child], d, v):
            hd[pos] = hd[child]
            hn[pos] = hn[child]
            pos = child
        else:
            break
    hd[pos] = d
    hn[pos] = v


def dijkstra(indptr, indices, weights, long root, mask=None, double horizon=INFINITY):
    cdef long[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef long[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef double[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    cdef cnp.ndarray cost_arr = np.full(n, np.inf)
    cdef cnp.ndarray parent_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] cost = cost_arr
    cdef long[::1] parent = parent_arr
    cdef unsigned char[::1] done = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] mk
    cdef bint use_mask = mask is not None
    if use_mask:
        mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t cap = ix.shape[0] + 1
    cdef double[::1] hd = np.empty(cap, dtype=np.float64)
    cdef long[::1] hn = np.empty(cap, dtype=np.int64)
    cdef Py_ssize_t size = 0
    cdef double d, nd, cv
    cdef long u, v
    cdef Py_ssize_t e
    with nogil:
        cost[root] = 0.0
        hd[0] = 0.0
        hn[0] = root
        size = 1
        while size > 0:
            d = hd[0]
            u = hn[0]
            size -= 1
            if size > 0:
                hd[0] = hd[size]
                hn[0] = hn[size]
                _sift_down(hd, hn, size)
            if done[u] or d > cost[u]:
                continue
            done[u] = 1
            if d > horizon:
                continue
            for e in range(ip[u], ip[u + 1]):
                v = ix[e]
                if done[v]:
                    continue
                if use_mask and not mk[v]:
                    continue
                nd = d + wt[e]
                cv = cost[v]
                if nd < cv:
                    cost[v] = nd
                    parent[v] = u
                    hd[size] = nd
                    hn[size] = v
                    size += 1
                    _sift_up(hd, hn, size - 1)
                elif nd == cv and u < parent[v]:
                    parent[v] = u
    return cost_arr, parent_arr


cdef inline bint _has_edge(long[::1] ip, long[::1] ix, long a, long b) nogil:
    cdef Py_ssize_t lo = ip[a], hi = ip[a + 1], mid
    cdef Py_ssize_t end = hi
    while lo < hi:
        mid = (lo + hi) >> 1
        if ix[mid] < b:
            lo = mid + 1
        else:
            hi = mid
    return lo < end and ix[lo] == b


def node2vec_walks(indptr, indices, starts, long walk_length, double p, double q, uniforms):
    cdef long[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef long[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef long[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef double[:, ::1] un = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n_walks = st.shape[0]
    cdef cnp.ndarray walks_arr = np.full((n_walks, walk_length), -1, dtype=np.int64)
    cdef long[:, ::1] walks = walks_arr
    cdef Py_ssize_t max_deg = 0
    cdef Py_ssize_t i
    for i in range(ip.shape[0] - 1):
        if ip[i + 1] - ip[i] > max_deg:
            max_deg = ip[i + 1] - ip[i]
    cdef double[::1] probs = np.empty(max(max_deg, 1), dtype=np.float64)
    cdef double inv_p = 1.0 / p, inv_q = 1.0 / q
    cdef double u, total, target, acc, a
    cdef long cur, prev, nxt, x, k
    cdef Py_ssize_t w, step, lo, hi, deg, e
    with nogil:
        for w in range(n_walks):
            cur = st[w]
            walks[w, 0] = cur
            prev = -1
            for step in range(1, walk_length):
                lo = ip[cur]
                hi = ip[cur + 1]
                deg = hi - lo
                if deg == 0:
                    break
                u = un[w, step - 1]
                if prev < 0:
                    k = <long>(u * deg)
                    if k > deg - 1:
                        k = deg - 1
                    nxt = ix[lo + k]
                else:
                    total = 0.0
                    for e in range(lo, hi):
                        x = ix[e]
                        if x == prev:
                            a = inv_p
                        elif _has_edge(ip, ix, prev, x):
                            a = 1.0
                        else:
                            a = inv_q
                        probs[e - lo] = a
                        total += a
                    target = u * total
                    acc = 0.0
                    nxt = ix[hi - 1]
                    for e in range(lo, hi):
                        acc += probs[e - lo]
                        if target < acc:
                            nxt = ix[e]
                            break
                walks[w, step] = nxt
                prev = cur
                cur = nxt
    return walks_arr

