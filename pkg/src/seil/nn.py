"""Small numeric core: dense stacks, a masked multi-layer LSTM, two losses,
Adam, EMA parameter tracking and a finite-difference gradient check.

Parameters are float32 arrays kept in insertion-ordered dicts.  Every
forward function returns ``(output, cache)`` and has a matching backward
that consumes the cache.  Weight matrices are stored ``(fan_in, fan_out)``
so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import SplitMix64

DTYPE = np.float32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ParamSet:
    params: dict[str, np.ndarray]
    ema: Optional[dict[str, np.ndarray]] = None
    adam_m: Optional[dict[str, np.ndarray]] = None
    adam_v: Optional[dict[str, np.ndarray]] = None
    adam_t: int = 0

    def names(self) -> list[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def init_ema(self) -> None:
        self.ema = {k: v.copy() for k, v in self.params.items()}

    def init_adam(self) -> None:
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_t = 0

    def copy(self) -> "ParamSet":
        dup = lambda d: None if d is None else {k: v.copy() for k, v in d.items()}
        return ParamSet(dup(self.params), dup(self.ema), dup(self.adam_m), dup(self.adam_v), self.adam_t)

    def ema_view(self) -> "ParamSet":
        """The EMA shadow as a stand-alone (read-only use) ParamSet."""
        if self.ema is None:
            raise ValueError("no EMA shadow")
        return ParamSet(self.ema)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.params.items()})

    def check_consistent(self) -> None:
        for role in ("ema", "adam_m", "adam_v"):
            other = getattr(self, role)
            if other is None:
                continue
            if list(other) != list(self.params):
                raise ValueError(f"{role} names differ from params")
            for k, v in self.params.items():
                if other[k].shape != v.shape:
                    raise ValueError(f"{role}[{k}] shape {other[k].shape} != {v.shape}")


# ---------------------------------------------------------------------------
# layer declarations and initialization


def dense_layers(prefix: str, sizes) -> list[tuple]:
    return [("dense", f"{prefix}.{i}", sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


def lstm_layers(prefix: str, input_dim: int, hidden: int, n_layers: int) -> list[tuple]:
    dims = [input_dim] + [hidden] * n_layers
    return [("lstm", f"{prefix}.{i}", dims[i], hidden) for i in range(n_layers)]


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(layers: list[tuple], seed: int) -> ParamSet:
    """Xavier-uniform weights, zero biases, LSTM forget-gate bias 1.0.

    Draws come from one splitmix64 stream in declaration order, row-major.
    """
    for kind, name, n_in, n_out in layers:
        if n_in <= 0 or n_out <= 0:
            raise ValueError(f"layer {name}: dimensions must be positive")
    rng = SplitMix64(seed)
    params: dict[str, np.ndarray] = {}
    for kind, name, n_in, n_out in layers:
        if kind == "dense":
            shape, bias = (n_in, n_out), np.zeros(n_out, dtype=DTYPE)
        elif kind == "lstm":
            shape, bias = (n_out + n_in, 4 * n_out), np.zeros(4 * n_out, dtype=DTYPE)
            bias[n_out:2 * n_out] = 1.0
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        a = xavier_bound(*shape)
        u = rng.uniform_block(shape[0] * shape[1]).reshape(shape)
        params[f"{name}.W"] = (a * (2.0 * u - 1.0)).astype(DTYPE)
        params[f"{name}.b"] = bias
    return ParamSet(params)


def _count_layers(params, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no layers with prefix {prefix!r}")
    return n


def _p(params):
    return params.params if isinstance(params, ParamSet) else params


# ---------------------------------------------------------------------------
# dense stacks


def mlp_forward(params, x: np.ndarray, prefix: str = "mlp", activation: str = "none"):
    """Dense stack with relu between layers; ``activation`` applies to the last layer."""
    p = _p(params)
    n = _count_layers(p, prefix)
    if x.shape[-1] != p[f"{prefix}.0.W"].shape[0]:
        raise ValueError(f"{prefix}: input dim {x.shape[-1]} != {p[f'{prefix}.0.W'].shape[0]}")
    inputs, pre = [], []
    h = x
    for i in range(n):
        inputs.append(h)
        z = h @ p[f"{prefix}.{i}.W"] + p[f"{prefix}.{i}.b"]
        pre.append(z)
        last = i == n - 1
        h = z if (last and activation == "none") else np.maximum(z, 0)
    return h, (prefix, activation, inputs, pre)


def mlp_backward(params, cache, dout: np.ndarray):
    """Returns (grads, d_input).  Leading axes of the input are flattened into the batch."""
    p = _p(params)
    prefix, activation, inputs, pre = cache
    n = len(inputs)
    grads = {}
    d = dout
    for i in reversed(range(n)):
        if not (i == n - 1 and activation == "none"):
            d = d * (pre[i] > 0)
        x = inputs[i]
        x2 = x.reshape(-1, x.shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        grads[f"{prefix}.{i}.W"] = x2.T @ d2
        grads[f"{prefix}.{i}.b"] = d2.sum(axis=0, dtype=np.float64).astype(d.dtype)
        d = d @ p[f"{prefix}.{i}.W"].T
    return grads, d


# ---------------------------------------------------------------------------
# LSTM


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _lstm_layer_forward(W, b, X, mask):
    """One LSTM layer over X (B, T, D).  Steps where mask is 0 carry state unchanged."""
    B, T, D = X.shape
    H = W.shape[1] // 4
    Wh, Wx = W[:H], W[H:]
    XW = (X.reshape(B * T, D) @ Wx).reshape(B, T, 4 * H) + b
    h = np.zeros((B, H), dtype=X.dtype)
    c = np.zeros((B, H), dtype=X.dtype)
    Hs = np.empty((B, T, H), dtype=X.dtype)
    gates = np.empty((B, T, 4 * H), dtype=X.dtype)
    Cs_prev = np.empty((B, T, H), dtype=X.dtype)
    Hs_prev = np.empty((B, T, H), dtype=X.dtype)
    tanh_c = np.empty((B, T, H), dtype=X.dtype)
    for t in range(T):
        z = XW[:, t] + h @ Wh
        act = gates[:, t]
        act[:, :3 * H] = _sigmoid(z[:, :3 * H])
        act[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        i, f, o, g = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        Cs_prev[:, t] = c
        Hs_prev[:, t] = h
        tanh_c[:, t] = tc
        m = mask[:, t:t + 1]
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
        Hs[:, t] = h
    return Hs, (X, mask, gates, Cs_prev, Hs_prev, tanh_c)


def _lstm_layer_backward(W, cache, dHs):
    X, mask, gates, Cs_prev, Hs_prev, tanh_c = cache
    B, T, D = X.shape
    H = W.shape[1] // 4
    Wh = W[:H]
    dZ = np.empty((B, T, 4 * H), dtype=X.dtype)
    dh = np.zeros((B, H), dtype=X.dtype)
    dc = np.zeros((B, H), dtype=X.dtype)
    for t in reversed(range(T)):
        m = mask[:, t:t + 1]
        dh = dh + dHs[:, t]
        act = gates[:, t]
        i, f, o, g = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        tc = tanh_c[:, t]
        dh_new = np.where(m, dh, 0)
        dc_new = np.where(m, dc, 0) + dh_new * o * (1 - tc * tc)
        dz = dZ[:, t]
        dz[:, :H] = dc_new * g * i * (1 - i)
        dz[:, H:2 * H] = dc_new * Cs_prev[:, t] * f * (1 - f)
        dz[:, 2 * H:3 * H] = dh_new * tc * o * (1 - o)
        dz[:, 3 * H:] = dc_new * i * (1 - g * g)
        dh = np.where(m, 0, dh) + dz @ Wh.T
        dc = np.where(m, 0, dc) + dc_new * f
    dZ2 = dZ.reshape(B * T, 4 * H)
    dW = np.empty_like(W)
    dW[:H] = Hs_prev.reshape(B * T, H).T @ dZ2
    dW[H:] = X.reshape(B * T, D).T @ dZ2
    db = dZ2.sum(axis=0, dtype=np.float64).astype(X.dtype)
    dX = (dZ2 @ W[H:].T).reshape(B, T, D)
    return dW, db, dX


def lengths_mask(lengths, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def lstm_forward(params, inputs: np.ndarray, lengths=None, prefix: str = "lstm"):
    """Stacked LSTM over padded ``inputs`` (B, T, D); h and c start at zero.

    Returns the top layer's hidden state at each sequence's last valid step.
    """
    p = _p(params)
    if inputs.ndim == 2:
        inputs = inputs[None]
    B, T, _ = inputs.shape
    if T == 0:
        raise ValueError("empty sequence")
    if lengths is None:
        lengths = np.full(B, T)
    mask = lengths_mask(lengths, T)
    n = _count_layers(p, prefix)
    caches = []
    X = inputs
    for layer in range(n):
        X, cache = _lstm_layer_forward(p[f"{prefix}.{layer}.W"], p[f"{prefix}.{layer}.b"], X, mask)
        caches.append(cache)
    return X[:, -1], (prefix, caches)


def lstm_backward(params, cache, dfinal: np.ndarray):
    p = _p(params)
    prefix, caches = cache
    B, T = caches[0][1].shape
    H = dfinal.shape[-1]
    dHs = np.zeros((B, T, H), dtype=dfinal.dtype)
    dHs[:, -1] = dfinal
    grads = {}
    for layer in reversed(range(len(caches))):
        W = p[f"{prefix}.{layer}.W"]
        dW, db, dHs = _lstm_layer_backward(W, caches[layer], dHs)
        grads[f"{prefix}.{layer}.W"] = dW
        grads[f"{prefix}.{layer}.b"] = db
    return grads, dHs


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    labels = np.asarray(labels)
    z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    B = len(labels)
    loss = float(np.mean(lse - z[np.arange(B), labels]))
    d = np.exp(z - lse[:, None])
    d[np.arange(B), labels] -= 1.0
    return loss, (d / B).astype(logits.dtype)


LOSSES = {"mse": mse_loss, "cross_entropy": cross_entropy}


# ---------------------------------------------------------------------------
# network specs usable with loss_and_grads / grad_check


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple
    prefix: str = "mlp"
    activation: str = "none"

    def layers(self):
        return dense_layers(self.prefix, self.sizes)

    def forward(self, params, x):
        return mlp_forward(params, x, self.prefix, self.activation)

    def backward(self, params, cache, dout):
        return mlp_backward(params, cache, dout)[0]


@dataclass(frozen=True)
class LSTMClassifierSpec:
    """Stacked LSTM followed by a linear head on the final hidden state.

    Inputs are ``(sequences, lengths)``.
    """

    input_dim: int
    hidden: int
    n_layers: int
    n_out: int
    prefix: str = "lstm"
    head: str = "head"

    def layers(self):
        return lstm_layers(self.prefix, self.input_dim, self.hidden, self.n_layers) + dense_layers(
            self.head, (self.hidden, self.n_out)
        )

    def forward(self, params, x):
        seqs, lengths = x
        H, lc = lstm_forward(params, seqs, lengths, self.prefix)
        out, hc = mlp_forward(params, H, self.head)
        return out, (lc, hc)

    def backward(self, params, cache, dout):
        lc, hc = cache
        grads, dH = mlp_backward(params, hc, dout)
        g2, _ = lstm_backward(params, lc, dH)
        grads.update(g2)
        return grads


def loss_and_grads(net, params, batch, loss_kind: str, batch_id=None):
    """Batch-mean loss and exact gradients, ordered like ``params``."""
    x, y = batch
    out, cache = net.forward(params, x)
    loss, dout = LOSSES[loss_kind](out, y)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite {loss_kind} loss ({loss}) on batch {batch_id}")
    grads = net.backward(params, cache, dout)
    p = _p(params)
    return loss, {k: grads[k] for k in p}


# ---------------------------------------------------------------------------
# optimizer and EMA


def adam_step(ps: ParamSet, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """In-place bias-corrected Adam update; returns ``ps``."""
    if ps.adam_m is None:
        raise ValueError("adam state not initialized")
    ps.adam_t += 1
    t = ps.adam_t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for k, w in ps.params.items():
        g = grads[k]
        m, v = ps.adam_m[k], ps.adam_v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return ps


def ema_update(ps: ParamSet, tau: float) -> ParamSet:
    """shadow <- tau * shadow + (1 - tau) * params, element-wise, in place."""
    if ps.ema is None:
        raise ValueError("EMA shadow not initialized")
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    for k, w in ps.params.items():
        s = ps.ema[k]
        s *= tau
        s += (1.0 - tau) * w
    return ps


# ---------------------------------------------------------------------------
# gradient check


def numeric_grads(net, params: dict, batch, loss_kind: str, eps: float) -> dict:
    x, y = batch
    out = {}
    for k, w in params.items():
        g = np.zeros_like(w)
        flat, gf = w.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = LOSSES[loss_kind](net.forward(params, x)[0], y)[0]
            flat[j] = orig - eps
            lm = LOSSES[loss_kind](net.forward(params, x)[0], y)[0]
            flat[j] = orig
            gf[j] = (lp - lm) / (2 * eps)
        out[k] = g
    return out


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


GRAD_CHECK_KINDS = ("dense_mse", "dense_ce", "dense_linear", "lstm_ce", "lstm_mse")


def _random_instance(kind: str, seed: int):
    rng = SplitMix64(seed)

    def randn(*shape):
        return rng.uniform_block(int(np.prod(shape))).reshape(shape) * 2.0 - 1.0

    B = 4
    if kind.startswith("dense"):
        act = "none"
        net = MLPSpec((5, 6, 3), activation=act) if kind != "dense_linear" else MLPSpec((5, 3))
        x = randn(B, 5)
    else:
        net = LSTMClassifierSpec(input_dim=3, hidden=4, n_layers=2, n_out=3)
        x = (randn(B, 3, 3), np.array([3, 2, 3, 1]))
    if kind.endswith("ce"):
        y = np.array([rng.randbelow(3) for _ in range(B)])
        loss = "cross_entropy"
    else:
        y = randn(B, 3)
        loss = "mse"
    params = init_params(net.layers(), seed).astype(np.float64).params
    for k in params:
        if k.endswith(".b"):
            params[k] = params[k] + 0.1 * randn(*params[k].shape)
    return net, params, (x, y), loss


def grad_check(kind: str, seed: int, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a small random instance of ``kind``.
    """
    if kind not in GRAD_CHECK_KINDS:
        raise ValueError(f"unknown grad-check kind {kind!r}; expected one of {GRAD_CHECK_KINDS}")
    net, params, batch, loss = _random_instance(kind, seed)
    _, analytic = loss_and_grads(net, params, batch, loss)
    numeric = numeric_grads(net, params, batch, loss, eps)
    return max(relative_error(analytic[k], numeric[k]) for k in params)


def check_gradients(net, params: dict, batch, loss_kind: str, eps: float = 1e-3) -> float:
    """grad_check for an arbitrary net/params pair (params should be float64)."""
    _, analytic = loss_and_grads(net, params, batch, loss_kind)
    numeric = numeric_grads(net, params, batch, loss_kind, eps)
    return max(relative_error(analytic[k], numeric[k]) for k in params)
