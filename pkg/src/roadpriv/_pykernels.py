"""Pure-Python graph kernels.

Reference implementations of the hot loops. ``_ckernels.pyx`` mirrors every
function here with the same signature and bit-identical results; the
selection happens in :mod:`roadpriv.kernels`.
"""
from __future__ import annotations

import heapq
import math

import numpy as np


def dijkstra(indptr, indices, weights, root, mask=None, horizon=math.inf):
    """Single-source shortest paths over a CSR graph.

    Nodes with ``mask[v] == 0`` are never entered, which restricts the search
    to the induced subgraph on the masked nodes. Settled nodes whose cost
    exceeds ``horizon`` are not expanded. Equal-cost ties are resolved toward
    the smaller node id, both for settle order and for the parent pointer.

    Returns ``(cost, parent)``; unreached nodes carry ``inf`` and ``-1``.
    """
    n = len(indptr) - 1
    cost = np.full(n, math.inf)
    parent = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    cost[root] = 0.0
    heap = [(0.0, int(root))]
    ip = indptr.tolist()
    ix = indices.tolist()
    wt = weights.tolist()
    mk = None if mask is None else mask.tolist()
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d > cost[u]:
            continue
        done[u] = True
        if d > horizon:
            continue
        for e in range(ip[u], ip[u + 1]):
            v = ix[e]
            if done[v] or (mk is not None and not mk[v]):
                continue
            nd = d + wt[e]
            cv = cost[v]
            if nd < cv:
                cost[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == cv and u < parent[v]:
                parent[v] = u
    return cost, parent


def _has_edge(indptr, indices, a, b):
    lo, hi = indptr[a], indptr[a + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < b:
            lo = mid + 1
        else:
            hi = mid
    return lo < indptr[a + 1] and indices[lo] == b


def node2vec_walks(indptr, indices, starts, walk_length, p, q, uniforms):
    """Second-order biased walks over a CSR graph with sorted neighbor lists.

    ``uniforms`` has shape ``(len(starts), walk_length - 1)``; one draw is
    consumed per step. From ``cur`` with predecessor ``prev`` the unnormalized
    weight of neighbor ``x`` is ``1/p`` if ``x == prev``, ``1`` if ``prev -> x``
    is an edge, and ``1/q`` otherwise. Walks stop early at sink nodes; the
    unused tail is filled with ``-1``.
    """
    n_walks = len(starts)
    walks = np.full((n_walks, walk_length), -1, dtype=np.int64)
    ip = indptr.tolist()
    ix = indices.tolist()
    inv_p = 1.0 / p
    inv_q = 1.0 / q
    for w in range(n_walks):
        cur = int(starts[w])
        walks[w, 0] = cur
        prev = -1
        for step in range(1, walk_length):
            lo, hi = ip[cur], ip[cur + 1]
            deg = hi - lo
            if deg == 0:
                break
            u = uniforms[w, step - 1]
            if prev < 0:
                k = min(int(u * deg), deg - 1)
                nxt = ix[lo + k]
            else:
                total = 0.0
                probs = []
                for e in range(lo, hi):
                    x = ix[e]
                    if x == prev:
                        a = inv_p
                    elif _has_edge(ip, ix, prev, x):
                        a = 1.0
                    else:
                        a = inv_q
                    probs.append(a)
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
    return walks

