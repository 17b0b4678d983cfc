"""Numpy neural-network kernel with hand-written backward passes.

Everything here is dtype-agnostic: arrays keep the dtype they are given, so the
model runs in float32 while gradient checks can run the very same code in
float64. Batched inputs carry the batch on axis 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def sigmoid(x):
    # tanh form is overflow-free for both signs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x).astype(np.result_type(x), copy=False)


def forget_decay(pre_f):
    """Continuous memory decay exp(-softplus(f)), in (0, 1]."""
    return np.exp(-softplus(pre_f))


# ---------------------------------------------------------------------------
# xLSTM cell and layer
# ---------------------------------------------------------------------------


class CellParams(NamedTuple):
    """Gate weights in the fixed block order [input, forget, output, candidate]."""

    Wx: np.ndarray  # (d_in, 4h)
    Wh: np.ndarray  # (h, 4h)
    b: np.ndarray  # (4h,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]


class CellState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


def zero_state(batch: int, hidden: int, dtype=np.float32) -> CellState:
    return CellState(np.zeros((batch, hidden), dtype), np.zeros((batch, hidden), dtype))


def _activate(pre, hid):
    i = sigmoid(pre[:, :hid])
    a = forget_decay(pre[:, hid : 2 * hid])
    o = sigmoid(pre[:, 2 * hid : 3 * hid])
    g = np.tanh(pre[:, 3 * hid :])
    return i, a, o, g


def _step_backward(dh, dc, i, a, o, g, c_prev, tanh_c):
    """Gradient of the gate pre-activations and of c_prev for one time step."""
    dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
    return (
        np.concatenate(
            [
                dc * g * i * (1.0 - i),
                # d alpha / d f = -alpha * sigmoid(f) = -alpha * (1 - alpha)
                -dc * c_prev * a * (1.0 - a),
                dh * tanh_c * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ],
            axis=1,
        ),
        dc * a,
    )


def _check_shapes(x, state, params):
    if x.shape[-1] != params.Wx.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != W_x rows {params.Wx.shape[0]}")
    hid = params.hidden
    if params.Wx.shape[1] != 4 * hid or params.Wh.shape != (hid, 4 * hid) or params.b.shape != (4 * hid,):
        raise ValueError("inconsistent xLSTM parameter shapes")
    if state is not None and (state.h.shape[-1] != hid or state.c.shape[-1] != hid):
        raise ValueError(f"state width does not match hidden size {hid}")


def xlstm_cell_forward(x, state: CellState, params: CellParams):
    """One step for a batch ``x`` of shape (N, d_in). Returns (CellState, cache)."""
    _check_shapes(x, state, params)
    hid = params.hidden
    pre = x @ params.Wx + state.h @ params.Wh + params.b
    i, a, o, g = _activate(pre, hid)
    c = a * state.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    check_finite("xlstm cell output", h)
    cache = (x, state.h, state.c, pre, i, a, o, g, tanh_c)
    return CellState(h, c), cache


def xlstm_cell_backward(grad_h, grad_c, cache, params: CellParams):
    """Reverse-mode gradients of one cell step.

    Returns ``(grad_x, CellState(grad_h_prev, grad_c_prev), CellParams of grads)``.
    """
    x, h_prev, c_prev, _pre, i, a, o, g, tanh_c = cache
    if grad_h.shape != h_prev.shape or grad_c.shape != c_prev.shape:
        raise ValueError("upstream gradient shape does not match the cached state")
    dpre, dc_prev = _step_backward(grad_h, grad_c, i, a, o, g, c_prev, tanh_c)
    grads = CellParams(x.T @ dpre, h_prev.T @ dpre, dpre.sum(axis=0))
    return dpre @ params.Wx.T, CellState(dpre @ params.Wh.T, dc_prev), grads


def xlstm_layer_forward(seq, params: CellParams, state: Optional[CellState] = None):
    """Scan the cell over ``seq`` of shape (N, T, d_in).

    Returns the hidden states (N, T, h), the final CellState and a cache.
    """
    n, t_len, _ = seq.shape
    hid = params.hidden
    if state is None:
        state = zero_state(n, hid, seq.dtype)
    _check_shapes(seq, state, params)
    # input projection for all steps at once
    xw = (seq.reshape(n * t_len, -1) @ params.Wx).reshape(n, t_len, 4 * hid) + params.b
    dtype = xw.dtype
    hs = np.empty((n, t_len, hid), dtype)
    store = {k: np.empty((n, t_len, hid), dtype) for k in ("h_prev", "c_prev", "i", "a", "o", "g", "tanh_c")}
    h, c = state
    for t in range(t_len):
        i, a, o, g = _activate(xw[:, t] + h @ params.Wh, hid)
        store["h_prev"][:, t] = h
        store["c_prev"][:, t] = c
        c = a * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        hs[:, t] = h
        for k, v in (("i", i), ("a", a), ("o", o), ("g", g), ("tanh_c", tanh_c)):
            store[k][:, t] = v
    check_finite("xlstm layer output", hs)
    return hs, CellState(h, c), (seq, store)


def xlstm_layer_backward(grad_hs, cache, params: CellParams, grad_state: Optional[CellState] = None):
    """Backpropagation through time for :func:`xlstm_layer_forward`.

    ``grad_hs`` is the gradient w.r.t. every emitted hidden state (N, T, h);
    ``grad_state`` optionally adds gradient on the final (h, c).
    Returns ``(grad_seq, grad_initial_state, CellParams of grads)``.
    """
    seq, st = cache
    n, t_len, d_in = seq.shape
    hid = params.hidden
    if grad_state is None:
        dh = np.zeros((n, hid), grad_hs.dtype)
        dc = np.zeros((n, hid), grad_hs.dtype)
    else:
        dh, dc = grad_state
    dpre = np.empty((n, t_len, 4 * hid), grad_hs.dtype)
    WhT = params.Wh.T
    for t in range(t_len - 1, -1, -1):
        dpre_t, dc = _step_backward(
            grad_hs[:, t] + dh, dc,
            st["i"][:, t], st["a"][:, t], st["o"][:, t], st["g"][:, t], st["c_prev"][:, t], st["tanh_c"][:, t],
        )
        dpre[:, t] = dpre_t
        dh = dpre_t @ WhT
    flat = dpre.reshape(n * t_len, 4 * hid)
    grads = CellParams(
        seq.reshape(n * t_len, d_in).T @ flat,
        st["h_prev"].reshape(n * t_len, hid).T @ flat,
        flat.sum(axis=0),
    )
    grad_seq = (flat @ params.Wx.T).reshape(n, t_len, d_in)
    return grad_seq, CellState(dh, dc), grads


# ---------------------------------------------------------------------------
# embedding, dense layers, softmax + cross-entropy
# ---------------------------------------------------------------------------


def embedding_forward(tokens, table):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise IndexError(f"token id outside [0, {table.shape[0]})")
    return table[tokens]


def embedding_backward(grad_out, tokens, num_rows: int):
    """Scatter-add gradients back onto table rows; repeated ids accumulate."""
    grad = np.zeros((num_rows, grad_out.shape[-1]), grad_out.dtype)
    np.add.at(grad, np.asarray(tokens).reshape(-1), grad_out.reshape(-1, grad_out.shape[-1]))
    return grad


def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def dense_backward(grad_out, x, W):
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, out):
    return grad_out * (out > 0)


def dropout(x, p: float, train: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns (output, mask); the mask already holds the 1/(1-p) scale."""
    if not train or p <= 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of the true labels."""
    labels = np.asarray(labels)
    k = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label outside [0, {k})")
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.log(picked).mean())


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of mean cross-entropy w.r.t. the logits: (p - onehot) / N."""
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1
    return grad / grad.dtype.type(len(labels))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 2e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], opt: OptimizerState) -> None:
    """One AdamW update, in place: decoupled decay ``w *= 1 - lr*wd`` then the Adam step."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    decay = 1.0 - opt.lr * opt.weight_decay
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(w)
            opt.v[name] = np.zeros_like(w)
        v = opt.v[name]
        w *= w.dtype.type(decay)
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        denom = np.sqrt(v / w.dtype.type(bc2))
        denom += opt.eps
        w -= w.dtype.type(opt.lr / bc1) * m / denom


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads.values()))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale every gradient by max_norm / norm when the joint L2 norm exceeds max_norm.

    Returns ``(grads, norm_before_clipping)``.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


@dataclass
class PlateauSchedule:
    """Halve the learning rate on a validation plateau and signal early stopping.

    An epoch counts as an improvement only when the loss drops by at least
    ``min_delta`` below the best seen so far.
    """

    lr: float
    factor: float = 0.5
    patience: int = 2
    min_delta: float = 1e-4
    min_lr: float = 1e-5
    stop_patience: int = 5
    best: float = math.inf
    best_epoch: int = -1
    epochs: int = 0
    bad_epochs: int = 0  # since the last improvement or lr reduction
    stale_epochs: int = 0  # since the last improvement

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True if it is a new best."""
        self.epochs += 1
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = self.epochs
            self.bad_epochs = 0
            self.stale_epochs = 0
            return True
        self.bad_epochs += 1
        self.stale_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.stop_patience


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))
