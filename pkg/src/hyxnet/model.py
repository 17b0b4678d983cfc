"""The assembled detector network and its checkpoint format.

Pipeline: token embedding -> stacked xLSTM layers -> final hidden state of the
top layer, concatenated after the standardized numeric vector -> two
ReLU/dropout dense layers -> K-way linear output -> softmax.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import nn
from .encoder import NUM_BUCKETS, SEQ_LEN, FeatureScaler
from .ingest import FeatureSchema, LabelMap

MAGIC = b"HYXN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class HyxnetConfig:
    d_n: int = 8
    k: int = 12
    seq_len: int = SEQ_LEN
    num_buckets: int = NUM_BUCKETS
    d_emb: int = 64
    hidden: int = 128
    layers: int = 2
    head: tuple[int, ...] = (256, 128)
    dropout: float = 0.2
    # also feed the standardized numerics into every recurrent step
    numeric_per_step: bool = False
    forget_bias: float = -1.0

    def __post_init__(self):
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        ints = (self.d_n, self.k, self.seq_len, self.num_buckets, self.d_emb, self.hidden, self.layers)
        if min(ints) <= 0 or not self.head or min(self.head) <= 0:
            raise ValueError(f"config sizes must be positive: {self}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def layer_input(self) -> int:
        return self.d_emb + (self.d_n if self.numeric_per_step else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = list(self.head)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyxnetConfig":
        return cls(**{**d, "head": tuple(d["head"])})


def param_shapes(cfg: HyxnetConfig) -> Dict[str, tuple]:
    """Every learnable array in checkpoint order."""
    shapes = {"embedding": (cfg.num_buckets, cfg.d_emb)}
    d_in = cfg.layer_input
    for layer in range(cfg.layers):
        shapes[f"xlstm{layer}.Wx"] = (d_in, 4 * cfg.hidden)
        shapes[f"xlstm{layer}.Wh"] = (cfg.hidden, 4 * cfg.hidden)
        shapes[f"xlstm{layer}.b"] = (4 * cfg.hidden,)
        d_in = cfg.hidden
    width = cfg.d_n + cfg.hidden
    for j, out in enumerate(cfg.head):
        shapes[f"head{j}.W"] = (width, out)
        shapes[f"head{j}.b"] = (out,)
        width = out
    shapes["out.W"] = (width, cfg.k)
    shapes["out.b"] = (cfg.k,)
    return shapes


def count_params(cfg: HyxnetConfig) -> int:
    h, e = cfg.hidden, cfg.layer_input
    total = cfg.num_buckets * cfg.d_emb
    total += e * 4 * h + h * 4 * h + 4 * h
    total += (cfg.layers - 1) * (h * 4 * h + h * 4 * h + 4 * h)
    width = cfg.d_n + h
    for out in cfg.head:
        total += width * out + out
        width = out
    return total + width * cfg.k + cfg.k


def init_params(cfg: HyxnetConfig, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embedding":
            w = rng.uniform(-0.05, 0.05, shape)
        elif name.endswith(".b"):
            w = np.zeros(shape)
            if name.startswith("xlstm"):
                w[cfg.hidden : 2 * cfg.hidden] = cfg.forget_bias
        else:
            bound = 1.0 / np.sqrt(shape[0])
            w = rng.uniform(-bound, bound, shape)
        params[name] = w.astype(dtype)
    return params


def cell_params(params: Dict[str, np.ndarray], layer: int) -> nn.CellParams:
    p = f"xlstm{layer}."
    return nn.CellParams(params[p + "Wx"], params[p + "Wh"], params[p + "b"])


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    confidence: float

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Prediction":
        label = int(np.argmax(probs))
        return cls(probs, label, float(probs[label]))


def _check_inputs(cfg: HyxnetConfig, tokens, nums):
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ValueError(f"tokens must have shape (N, {cfg.seq_len}), got {tokens.shape}")
    if nums.shape != (tokens.shape[0], cfg.d_n):
        raise ValueError(f"numerics must have shape ({tokens.shape[0]}, {cfg.d_n}), got {nums.shape}")


def forward(params, cfg: HyxnetConfig, tokens, nums, train: bool = False, rng: Optional[np.random.Generator] = None):
    """Batched forward pass. Returns ``(probs, cache)``; ``cache`` feeds :func:`backward`."""
    tokens = np.asarray(tokens)
    dtype = params["embedding"].dtype
    nums = np.asarray(nums, dtype=dtype)
    _check_inputs(cfg, tokens, nums)
    n = tokens.shape[0]

    x = nn.embedding_forward(tokens, params["embedding"])
    if cfg.numeric_per_step:
        x = np.concatenate([np.broadcast_to(nums[:, None, :], (n, cfg.seq_len, cfg.d_n)), x], axis=2)
    layer_caches = []
    for layer in range(cfg.layers):
        x, _, lc = nn.xlstm_layer_forward(x, cell_params(params, layer))
        layer_caches.append(lc)

    act = np.concatenate([nums, x[:, -1]], axis=1)
    head_caches = []
    for j in range(len(cfg.head)):
        inp = act
        out = nn.relu(nn.dense_forward(inp, params[f"head{j}.W"], params[f"head{j}.b"]))
        act, mask = nn.dropout(out, cfg.dropout, train, rng)
        head_caches.append((inp, out, mask))
    logits = nn.dense_forward(act, params["out.W"], params["out.b"])
    probs = nn.softmax(logits)
    nn.check_finite("logits", logits)
    return probs, (tokens, layer_caches, head_caches, act)


def backward(params, cfg: HyxnetConfig, cache, grad_logits) -> Dict[str, np.ndarray]:
    tokens, layer_caches, head_caches, act = cache
    grads = {}
    g, grads["out.W"], grads["out.b"] = nn.dense_backward(grad_logits, act, params["out.W"])
    for j in range(len(cfg.head) - 1, -1, -1):
        inp, out, mask = head_caches[j]
        if mask is not None:
            g = g * mask
        g = nn.relu_backward(g, out)
        g, grads[f"head{j}.W"], grads[f"head{j}.b"] = nn.dense_backward(g, inp, params[f"head{j}.W"])

    n = tokens.shape[0]
    g_top = g[:, cfg.d_n :]
    grad_hs = np.zeros((n, cfg.seq_len, cfg.hidden), g.dtype)
    grad_hs[:, -1] = g_top
    for layer in range(cfg.layers - 1, -1, -1):
        cp = cell_params(params, layer)
        grad_hs, _, lg = nn.xlstm_layer_backward(grad_hs, layer_caches[layer], cp)
        p = f"xlstm{layer}."
        grads[p + "Wx"], grads[p + "Wh"], grads[p + "b"] = lg
    if cfg.numeric_per_step:
        grad_hs = grad_hs[:, :, cfg.d_n :]
    grads["embedding"] = nn.embedding_backward(grad_hs, tokens, cfg.num_buckets)
    return {name: grads[name] for name in params}


def loss_and_grads(params, cfg, tokens, nums, labels, train=True, rng=None):
    probs, cache = forward(params, cfg, tokens, nums, train, rng)
    loss = nn.cross_entropy(probs, labels)
    return loss, backward(params, cfg, cache, nn.softmax_cross_entropy_backward(probs, labels))


def predict_proba(params, cfg, tokens, nums, batch_size: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(tokens), batch_size):
        probs, _ = forward(params, cfg, tokens[s : s + batch_size], nums[s : s + batch_size])
        out.append(probs)
    if not out:
        return np.zeros((0, cfg.k), params["embedding"].dtype)
    return np.concatenate(out)


class Predictor:
    """Single-record inference with frozen parameters.

    A name with m labels is left-padded with T - m pad tokens, and the
    recurrent states reached after any run of leading pads are the same for
    every input, so they are computed once here. Each call then only scans
    the m real tokens. Results match :func:`forward` up to float rounding.
    """

    def __init__(self, params, cfg: HyxnetConfig):
        self.params = params
        self.cfg = cfg
        self.cells = [cell_params(params, layer) for layer in range(cfg.layers)]
        self._prefix = None if cfg.numeric_per_step else self._pad_prefix_states()
        scale = np.full(4 * cfg.hidden, 0.5)
        scale[3 * cfg.hidden :] = 1.0
        self._gate_scale = scale.astype(params["embedding"].dtype)

    def _pad_prefix_states(self):
        cfg = self.cfg
        dtype = self.params["embedding"].dtype
        states = [nn.zero_state(1, cfg.hidden, dtype) for _ in range(cfg.layers)]
        prefix = [list(states)]
        pad = self.params["embedding"][:1]
        for _ in range(cfg.seq_len - 1):
            x = pad
            for layer, cp in enumerate(self.cells):
                states[layer], _ = nn.xlstm_cell_forward(x, states[layer], cp)
                x = states[layer].h
            prefix.append(list(states))
        return prefix

    def __call__(self, tokens, nums) -> Prediction:
        cfg = self.cfg
        tokens = np.asarray(tokens).reshape(-1)
        nums = np.asarray(nums, dtype=self.params["embedding"].dtype).reshape(1, -1)
        if self._prefix is None:
            probs, _ = forward(self.params, cfg, tokens[None, :], nums)
            return Prediction.from_probs(probs[0])
        if tokens.shape != (cfg.seq_len,) or nums.shape[1] != cfg.d_n:
            raise ValueError("encoded input does not match the model configuration")
        n_pad = int(np.count_nonzero(np.cumprod(tokens == 0)))
        n_pad = min(n_pad, cfg.seq_len - 1)
        x = nn.embedding_forward(tokens[n_pad:], self.params["embedding"])
        hid = cfg.hidden
        for layer, cp in enumerate(self.cells):
            h, c = self._prefix[n_pad][layer]
            xw = x @ cp.Wx + cp.b
            hs = np.empty((x.shape[0], hid), x.dtype)
            for t in range(x.shape[0]):
                pre = xw[t : t + 1] + h @ cp.Wh
                # one tanh for all gates: sigmoid(z) = 0.5 * (1 + tanh(z / 2))
                th = np.tanh(pre * self._gate_scale)
                a = nn.forget_decay(pre[:, hid : 2 * hid])
                c = a * c + 0.5 * (1.0 + th[:, :hid]) * th[:, 3 * hid :]
                h = 0.5 * (1.0 + th[:, 2 * hid : 3 * hid]) * np.tanh(c)
                hs[t] = h[0]
            x = hs
        act = np.concatenate([nums, x[-1:]], axis=1)
        for j in range(len(cfg.head)):
            act = nn.relu(act @ self.params[f"head{j}.W"] + self.params[f"head{j}.b"])
        logits = act @ self.params["out.W"] + self.params["out.b"]
        nn.check_finite("logits", logits)
        return Prediction.from_probs(nn.softmax(logits)[0])


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: HyxnetConfig
    scaler: FeatureScaler
    labels: LabelMap
    schema: Optional[FeatureSchema] = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params, config: HyxnetConfig, scaler: FeatureScaler, labels: LabelMap,
                    schema: Optional[FeatureSchema] = None, meta: Optional[dict] = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: ``HYXN``, uint32 version, uint32 header length, UTF-8 JSON header,
    then the raw little-endian arrays listed in the header manifest (scaler
    mean and std as float64, followed by the parameters in
    :func:`param_shapes` order), then a CRC32 of everything before it.
    """
    if scaler.d_n != config.d_n or labels.k != config.k:
        raise CheckpointError(
            f"scaler has {scaler.d_n} features and label map {labels.k} classes; "
            f"config expects d_n={config.d_n}, k={config.k}"
        )
    arrays = [("scaler.mean", scaler.mean), ("scaler.std", scaler.std)]
    shapes = param_shapes(config)
    if set(shapes) != set(params):
        raise CheckpointError("parameter names do not match the configuration")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {shape}")
        arrays.append((name, params[name]))
    header = {
        "config": config.to_dict(),
        "labels": list(labels.names),
        "scaler": {"names": None if scaler.names is None else list(scaler.names), "constant": list(scaler.constant)},
        "schema": None if schema is None else [list(c) for c in schema.columns],
        "meta": meta or {},
        "arrays": [[name, a.dtype.newbyteorder("<").str, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(blob))
    body += blob
    for _, a in arrays:
        body += np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + hlen + 4:
        raise CheckpointError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None

    offset = 12 + hlen
    arrays = {}
    for name, dt, shape in header["arrays"]:
        dtype = np.dtype(dt)
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(data) - 4:
            raise CheckpointError(f"{path}: truncated at array {name}")
        arrays[name] = np.frombuffer(data, dtype, count, offset).reshape(shape).astype(dtype.newbyteorder("="))
        offset = end
    if offset != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - offset} trailing bytes")

    config = HyxnetConfig.from_dict(header["config"])
    labels = LabelMap(tuple(header["labels"]))
    sc = header["scaler"]
    scaler = FeatureScaler(arrays.pop("scaler.mean"), arrays.pop("scaler.std"),
                           None if sc["names"] is None else tuple(sc["names"]), tuple(sc["constant"]))
    schema = None if header["schema"] is None else FeatureSchema(tuple(tuple(c) for c in header["schema"]))
    shapes = param_shapes(config)
    if set(shapes) != set(arrays):
        raise CheckpointError(f"{path}: parameter set does not match its configuration")
    for name, shape in shapes.items():
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
    if scaler.d_n != config.d_n or labels.k != config.k:
        raise CheckpointError(f"{path}: scaler/label dimensions disagree with config")
    params = {name: arrays[name] for name in shapes}
    return Checkpoint(params, config, scaler, labels, schema, header.get("meta", {}))
