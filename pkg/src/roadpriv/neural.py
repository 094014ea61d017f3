"""Dense float64 layers with hand-written gradients.

Every layer follows the same pattern: ``forward`` returns the output and a
cache, ``backward`` takes the output gradient and that cache, accumulates
parameter gradients into the shared :class:`ParameterStore`, and returns the
input gradient. Batched sequence inputs are ``[B, T, d]`` and padded at the
end; forward-in-time recurrences and causal attention never look at later
positions, so trailing padding does not leak into valid positions.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFinite, OddDimension, ShapeMismatch

CHECKPOINT_FORMAT_VERSION = 1
LOG_CLAMP = 1e-12


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {what}")
    return arr


# ------------------------------------------------------------ parameters

@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ParameterStore:
    """Named float64 parameters, paired gradients and Adam moments."""

    def __init__(self, seed: int = 0, adam: AdamConfig | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.adam = adam or AdamConfig()
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, shape, fan_in: int | None = None, init: str = "uniform") -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
            arr = self.rng.uniform(-bound, bound, shape)
        self.params[name] = arr
        self.grads[name] = np.zeros(shape)
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def step(self) -> None:
        """One Adam update; aborts without touching parameters on NaN/Inf."""
        for name, g in self.grads.items():
            check_finite(g, f"gradient of {name}")
        self.t += 1
        a = self.adam
        c1 = 1.0 - a.beta1 ** self.t
        c2 = 1.0 - a.beta2 ** self.t
        for name, p in self.params.items():
            g = self.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= a.beta1
            m += (1.0 - a.beta1) * g
            v *= a.beta2
            v += (1.0 - a.beta2) * g * g
            p -= a.lr * (m / c1) / (np.sqrt(v / c2) + a.eps)

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": self.t,
        }

    def restore(self, snap: dict) -> None:
        for k in self.params:
            self.params[k][...] = snap["params"][k]
            self.m[k][...] = snap["m"][k]
            self.v[k][...] = snap["v"][k]
        self.t = snap["t"]


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None) -> None:
    """JSON manifest of named float64 arrays; round-trips bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "adam": {**store.adam.__dict__, "t": store.t},
        "params": {k: _encode(v) for k, v in store.params.items()},
        "moments": {k: {"m": _encode(store.m[k]), "v": _encode(store.v[k])} for k in store.params},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    adam = dict(doc["adam"])
    t = adam.pop("t")
    store = ParameterStore(adam=AdamConfig(**adam))
    for k, d in doc["params"].items():
        arr = _decode(d)
        store.params[k] = arr
        store.grads[k] = np.zeros_like(arr)
        store.m[k] = _decode(doc["moments"][k]["m"])
        store.v[k] = _decode(doc["moments"][k]["v"])
    store.t = t
    return store, doc["meta"]


# ----------------------------------------------------------- activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ----------------------------------------------------------------- losses

@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    clamped: int = 0
    count: int = 0


def cross_entropy_logits(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> LossResult:
    """Summed cross-entropy of integer ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., L]``; ``targets`` and the optional ``mask`` share its
    leading shape. Masked positions contribute neither loss nor gradient.
    The gradient w.r.t. logits is ``softmax - one_hot``.
    """
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    m = np.ones(lead) if mask is None else mask.astype(float)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None].astype(np.int64), axis=-1)[..., 0]
    loss = -float(np.sum(picked * m))
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None].astype(np.int64),
                      np.take_along_axis(grad, targets[..., None].astype(np.int64), axis=-1) - 1.0, axis=-1)
    grad *= m[..., None]
    return LossResult(loss, grad, 0, int(m.sum()))


def cross_entropy_probs(probs: np.ndarray, one_hot: np.ndarray) -> LossResult:
    """``-sum x_hat log h`` on probabilities, clamping ``h`` at 1e-12.

    The returned gradient is w.r.t. ``probs``.
    """
    if probs.shape != one_hot.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs targets {one_hot.shape}")
    clamped = int(np.sum((probs < LOG_CLAMP) & (one_hot > 0)))
    safe = np.maximum(probs, LOG_CLAMP)
    loss = -float(np.sum(one_hot * np.log(safe)))
    grad = np.where(probs < LOG_CLAMP, 0.0, -one_hot / safe)
    return LossResult(loss, grad, clamped, int(one_hot.sum()))


# ----------------------------------------------------------------- layers

class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True, init: str = "uniform"):
        self.store = store
        self.w = f"{name}.W"
        self.b = f"{name}.b" if bias else None
        store.add(self.w, (d_in, d_out), fan_in=d_in, init=init)
        if bias:
            store.add(self.b, (d_out,), fan_in=d_in, init=init)

    def forward(self, x: np.ndarray):
        y = x @ self.store[self.w]
        if self.b:
            y = y + self.store[self.b]
        return y, x

    def backward(self, dy: np.ndarray, x):
        s = self.store
        d_in = x.shape[-1]
        s.grads[self.w] += x.reshape(-1, d_in).T @ dy.reshape(-1, dy.shape[-1])
        if self.b:
            s.grads[self.b] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ s[self.w].T


def _lstm_scan(zx: np.ndarray, Wh: np.ndarray):
    """Recurrent part of ``D`` independent LSTMs run in one time loop.

    ``zx`` is ``[D, B, T, 4H]`` (input projections plus bias) and ``Wh`` is
    ``[D, H, 4H]``. Returns the hidden sequences ``[D, B, T, H]`` and a cache.
    """
    D, B, T, H4 = zx.shape
    H = H4 // 4
    h = np.zeros((D, B, H))
    c = np.zeros((D, B, H))
    hs = np.empty((D, B, T, H))
    gates = np.empty((D, B, T, H4))        # f, i, o, g after activation
    cs = np.empty((D, B, T, H))
    for t in range(T):
        z = zx[:, :, t] + np.matmul(h, Wh)
        gt = gates[:, :, t]
        gt[..., :3 * H] = sigmoid(z[..., :3 * H])
        gt[..., 3 * H:] = np.tanh(z[..., 3 * H:])
        c = gt[..., :H] * c + gt[..., H:2 * H] * gt[..., 3 * H:]
        cs[:, :, t] = c
        h = gt[..., 2 * H:3 * H] * np.tanh(c)
        hs[:, :, t] = h
    return hs, (hs, gates, cs)


def _lstm_scan_backward(dout: np.ndarray, Wh: np.ndarray, cache):
    """Gradients w.r.t. the scan inputs ``zx`` and the recurrent weights."""
    hs, gates, cs = cache
    D, B, T, H = dout.shape
    dz_all = np.empty((D, B, T, 4 * H))
    dh_next = np.zeros((D, B, H))
    dc_next = np.zeros((D, B, H))
    WhT = np.swapaxes(Wh, 1, 2)
    zeros = np.zeros((D, B, H))
    for t in range(T - 1, -1, -1):
        gt = gates[:, :, t]
        f, i, o, g = gt[..., :H], gt[..., H:2 * H], gt[..., 2 * H:3 * H], gt[..., 3 * H:]
        c_prev = cs[:, :, t - 1] if t else zeros
        tc = np.tanh(cs[:, :, t])
        dh = dout[:, :, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, :, t]
        dz[..., :H] = dc * c_prev * f * (1 - f)
        dz[..., H:2 * H] = dc * g * i * (1 - i)
        dz[..., 2 * H:3 * H] = dh * tc * o * (1 - o)
        dz[..., 3 * H:] = dc * i * (1 - g * g)
        dh_next = np.matmul(dz, WhT)
        dc_next = dc * f
    # h_{t-1} for every step: shift the hidden sequence right by one
    h_prev = np.concatenate([np.zeros((D, B, 1, H)), hs[:, :, :-1]], axis=2)
    dWh = np.matmul(np.swapaxes(h_prev.reshape(D, B * T, H), 1, 2), dz_all.reshape(D, B * T, 4 * H))
    return dz_all, dWh


class LSTMLayer:
    """One-direction LSTM; gate blocks ordered forget, input, output, candidate."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, hidden: int):
        self.store = store
        self.d_in = d_in
        self.h = hidden
        self.w = f"{name}.W"
        self.b = f"{name}.b"
        store.add(self.w, (d_in + hidden, 4 * hidden), fan_in=d_in + hidden)
        store.add(self.b, (4 * hidden,), fan_in=d_in + hidden)

    def project(self, x: np.ndarray) -> np.ndarray:
        """Input projections for every step at once; only ``h @ Wh`` is sequential."""
        B, T, d = x.shape
        if d != self.d_in:
            raise ShapeMismatch(f"LSTM expects input dim {self.d_in}, got {d}")
        W = self.store[self.w]
        return (x.reshape(B * T, d) @ W[:d]).reshape(B, T, 4 * self.h) + self.store[self.b]

    @property
    def Wh(self) -> np.ndarray:
        return self.store[self.w][self.d_in:]

    def accumulate(self, x: np.ndarray, dz: np.ndarray, dWh: np.ndarray, input_grad: bool = True):
        """Add this layer's gradients and return the input gradient (or None)."""
        B, T, d = x.shape
        flat = dz.reshape(B * T, 4 * self.h)
        dW = self.store.grads[self.w]
        dW[:d] += x.reshape(B * T, d).T @ flat
        dW[d:] += dWh
        self.store.grads[self.b] += flat.sum(axis=0)
        return (flat @ self.store[self.w][:d].T).reshape(B, T, d) if input_grad else None

    def forward(self, x: np.ndarray):
        out, cache = _lstm_scan(self.project(x)[None], self.Wh[None])
        return out[0], (x, cache)

    def backward(self, dout: np.ndarray, cache):
        x, scan = cache
        dz, dWh = _lstm_scan_backward(dout[None], self.Wh[None], scan)
        return self.accumulate(x, dz[0], dWh[0])


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """``idx[b, t]`` reverses the first ``lengths[b]`` steps and fixes the rest."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


class LSTMStack:
    """Stacked (optionally bidirectional) LSTM; the default depth is 5."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, hidden: int, layers: int = 5, bidirectional: bool = True):
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.fwd: list[LSTMLayer] = []
        self.bwd: list[LSTMLayer] = []
        d = d_in
        for k in range(layers):
            self.fwd.append(LSTMLayer(store, f"{name}.l{k}.fwd", d, hidden))
            if bidirectional:
                self.bwd.append(LSTMLayer(store, f"{name}.l{k}.bwd", d, hidden))
            d = hidden * (2 if bidirectional else 1)
        self.d_out = d

    def forward(self, x: np.ndarray, lengths: np.ndarray | None = None):
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        rev = reverse_index(lengths, T)
        rows = np.arange(B)[:, None]
        caches = []
        h = x
        for k, layer in enumerate(self.fwd):
            if not self.bidirectional:
                h, c = layer.forward(h)
                caches.append(c)
                continue
            # both directions share one time loop; the backward one reads reversed input
            back = self.bwd[k]
            hr = h[rows, rev]
            out, scan = _lstm_scan(np.stack([layer.project(h), back.project(hr)]), np.stack([layer.Wh, back.Wh]))
            caches.append((h, hr, scan))
            h = np.concatenate([out[0], out[1][rows, rev]], axis=2)
        return h, (caches, rev)

    def backward(self, dout: np.ndarray, cache, input_grad: bool = True):
        """Accumulate parameter gradients; return d(input) unless ``input_grad`` is False."""
        caches, rev = cache
        B = dout.shape[0]
        rows = np.arange(B)[:, None]
        H = self.hidden
        d = dout
        for k in range(len(self.fwd) - 1, -1, -1):
            need = input_grad or k > 0
            if not self.bidirectional:
                x, scan = caches[k]
                dz, dWh = _lstm_scan_backward(d[None], self.fwd[k].Wh[None], scan)
                d = self.fwd[k].accumulate(x, dz[0], dWh[0], need)
                continue
            layer, back = self.fwd[k], self.bwd[k]
            x, xr, scan = caches[k]
            dz, dWh = _lstm_scan_backward(np.stack([d[:, :, :H], d[:, :, H:][rows, rev]]),
                                          np.stack([layer.Wh, back.Wh]), scan)
            df = layer.accumulate(x, dz[0], dWh[0], need)
            db = back.accumulate(xr, dz[1], dWh[1], need)
            d = df + db[rows, rev] if need else None
        return d


def lstm_forward(stack: LSTMStack, inputs: np.ndarray) -> np.ndarray:
    """Hidden sequence ``[T, h]`` (``[T, 2h]`` if bidirectional) for one sequence."""
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ShapeMismatch(f"expected [T, d] with T >= 1, got {inputs.shape}")
    out, _ = stack.forward(inputs[None])
    return out[0]


class MultiHeadAttention:
    """Causal multi-head self-attention with per-head ``g x g_k`` projections."""

    def __init__(self, store: ParameterStore, name: str, g: int, heads: int, g_k: int | None = None):
        if g % heads:
            raise ShapeMismatch(f"model width {g} not divisible by {heads} heads")
        self.store = store
        self.g = g
        self.heads = heads
        self.gk = g_k or g // heads
        self.q, self.k, self.v, self.o = (f"{name}.{p}" for p in ("WQ", "WK", "WV", "WO"))
        for p in (self.q, self.k, self.v):
            store.add(p, (heads, g, self.gk), fan_in=g)
        store.add(self.o, (heads * self.gk, g), fan_in=heads * self.gk)

    def forward(self, X: np.ndarray, causal: bool = True):
        if X.shape[-1] != self.g:
            raise ShapeMismatch(f"attention expects width {self.g}, got {X.shape[-1]}")
        s = self.store
        B, N, _ = X.shape
        Q = np.einsum("bng,hgk->bhnk", X, s[self.q])
        K = np.einsum("bng,hgk->bhnk", X, s[self.k])
        V = np.einsum("bng,hgk->bhnk", X, s[self.v])
        scores = np.einsum("bhnk,bhmk->bhnm", Q, K) / math.sqrt(self.gk)
        if causal:
            scores = np.where(np.tril(np.ones((N, N), dtype=bool)), scores, -np.inf)
        A = softmax(scores)
        Hh = np.einsum("bhnm,bhmk->bhnk", A, V)
        cat = Hh.transpose(0, 2, 1, 3).reshape(B, N, self.heads * self.gk)
        out = cat @ s[self.o]
        return check_finite(out, "attention output"), (X, Q, K, V, A, cat)

    def backward(self, dout: np.ndarray, cache):
        X, Q, K, V, A, cat = cache
        s = self.store
        B, N, _ = X.shape
        s.grads[self.o] += cat.reshape(-1, cat.shape[-1]).T @ dout.reshape(-1, self.g)
        dcat = dout @ s[self.o].T
        dH = dcat.reshape(B, N, self.heads, self.gk).transpose(0, 2, 1, 3)
        dA = np.einsum("bhnk,bhmk->bhnm", dH, V)
        dV = np.einsum("bhnm,bhnk->bhmk", A, dH)
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / math.sqrt(self.gk)
        dQ = np.einsum("bhnm,bhmk->bhnk", dS, K)
        dK = np.einsum("bhnm,bhnk->bhmk", dS, Q)
        s.grads[self.q] += np.einsum("bng,bhnk->hgk", X, dQ)
        s.grads[self.k] += np.einsum("bng,bhnk->hgk", X, dK)
        s.grads[self.v] += np.einsum("bng,bhnk->hgk", X, dV)
        dX = (np.einsum("bhnk,hgk->bng", dQ, s[self.q])
              + np.einsum("bhnk,hgk->bng", dK, s[self.k])
              + np.einsum("bhnk,hgk->bng", dV, s[self.v]))
        return dX


def normalized_adjacency(n: int, edges) -> np.ndarray:
    """``D^-1/2 (E + I) D^-1/2`` for an undirected view of ``edges``."""
    E = np.zeros((n, n))
    for u, v in edges:
        if u != v:
            E[u, v] = E[v, u] = 1.0
    E += np.eye(n)
    dinv = 1.0 / np.sqrt(E.sum(axis=1))
    return dinv[:, None] * E * dinv[None, :]


class GCNLayer:
    """``S' = sigmoid(A_hat S Theta)`` with a fixed normalized adjacency."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int):
        self.store = store
        self.theta = f"{name}.Theta"
        store.add(self.theta, (d_in, d_out), fan_in=d_in)

    def forward(self, A_hat: np.ndarray, S: np.ndarray):
        AS = A_hat @ S
        out = sigmoid(AS @ self.store[self.theta])
        return out, (A_hat, AS, out)

    def backward(self, dout: np.ndarray, cache):
        A_hat, AS, out = cache
        dpre = dout * out * (1.0 - out)
        self.store.grads[self.theta] += AS.T @ dpre
        return A_hat.T @ (dpre @ self.store[self.theta].T)


def gcn_layer(A_hat: np.ndarray, S: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return sigmoid(A_hat @ S @ theta)


def positional_encoding(N: int, g: int) -> np.ndarray:
    """Sinusoidal encodings; even columns sin, odd columns cos."""
    if g % 2:
        raise OddDimension(f"positional encoding width must be even, got {g}")
    pos = np.arange(N)[:, None]
    freq = 10000.0 ** (np.arange(0, g, 2) / g)
    pe = np.zeros((N, g))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


# ----------------------------------------------------------- grad checks

def finite_difference(f, arr: np.ndarray, h: float = 1e-5, max_entries: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr``.

    Returns ``(flat_indices, gradients)``. ``arr`` is perturbed in place and
    restored.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    out = np.empty(len(idx))
    for n, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        out[n] = (fp - fm) / (2 * h)
    return idx, out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max over entries of ``|a - b| / max(|a|, |b|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
