"""Training loop, evaluation metrics and the end-to-end experiment driver."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .encoder import FeatureScaler, fit_scaler, tokenize_many, transform
from .ingest import DnsEvent, FeatureSchema, LabelMap, parse_dataset, split_events
from .model import HyxnetConfig, init_params, loss_and_grads, predict_proba, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EncodedSet:
    tokens: np.ndarray  # (N, T) int32
    nums: np.ndarray  # (N, d_n) standardized, float32
    labels: Optional[np.ndarray]  # (N,) int64

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx) -> "EncodedSet":
        return EncodedSet(self.tokens[idx], self.nums[idx], None if self.labels is None else self.labels[idx])


def encode_events(events: Sequence[DnsEvent], scaler: FeatureScaler, cfg: HyxnetConfig, dtype=np.float32) -> EncodedSet:
    tokens = tokenize_many([e.qname for e in events], cfg.seq_len, cfg.num_buckets)
    raw = np.array([e.numerics for e in events], dtype=np.float64).reshape(len(events), scaler.d_n)
    nums = transform(raw, scaler).astype(dtype)
    if all(e.label is not None for e in events):
        labels = np.array([e.label for e in events], dtype=np.int64)
    else:
        labels = None
    return EncodedSet(tokens, nums, labels)


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 50
    seed: int = 0
    lr: float = 2e-3
    weight_decay: float = 1e-4
    clip: float = 1.0
    train_ratio: float = 0.6
    val_ratio: float = 0.2

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ValueError("lr and weight decay must be positive")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch size must be >= 1 and max epochs >= 0")
        if not (0 < self.train_ratio < 1 and 0 <= self.val_ratio and self.train_ratio + self.val_ratio < 1):
            raise ValueError(f"invalid split ratios ({self.train_ratio}, {self.val_ratio})")


def mean_loss(params, cfg: HyxnetConfig, data: EncodedSet) -> float:
    probs = predict_proba(params, cfg, data.tokens, data.nums)
    return nn.cross_entropy(probs, data.labels)


def train(params, cfg: HyxnetConfig, train_set: EncodedSet, val_set: EncodedSet, config: TrainConfig,
          on_epoch=None):
    """Fit ``params`` (updated in place) and return ``(best_params, log)``.

    Epoch 0 of the log records losses before any update. Each later epoch
    shuffles with a generator seeded by (seed, epoch); dropout masks come from
    (seed, epoch, batch). ``on_epoch`` receives each log record as it is made.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    missing = sorted(set(range(cfg.k)) - set(train_set.labels.tolist()))
    if missing:
        log.warning("classes %s have no training samples", missing)

    opt = nn.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    sched = nn.PlateauSchedule(lr=config.lr)
    history = []

    def record(epoch, train_loss, val_loss, clipped=0):
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr, "clipped_batches": clipped}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)

    val0 = mean_loss(params, cfg, val_set)
    record(0, mean_loss(params, cfg, train_set), val0)
    sched.best, sched.best_epoch = val0, 0
    best = copy.deepcopy(params)

    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total, clipped = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, b])
            loss, grads = loss_and_grads(params, cfg, train_set.tokens[idx], train_set.nums[idx],
                                         train_set.labels[idx], train=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (lr={opt.lr:g})")
            grads, norm = nn.clip_global_norm(grads, config.clip)
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at epoch {epoch}, batch {b}")
            clipped += norm > config.clip
            nn.adamw_step(params, grads, opt)
            total += loss * len(idx)
        val_loss = mean_loss(params, cfg, val_set)
        record(epoch, total / n, val_loss, int(clipped))
        if sched.step(val_loss):
            best = copy.deepcopy(params)
        opt.lr = sched.lr
        if sched.should_stop:
            log.info("early stop at epoch %d (best epoch %d)", epoch, sched.best_epoch)
            break
    return best, history


@dataclass
class EvalReport:
    labels: tuple[str, ...]
    confusion: np.ndarray  # rows: true class, columns: predicted
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    misclassified: int

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def normalized(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)

    def to_dict(self) -> dict:
        per_class = {
            name: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
            for name, p, r, f, s in zip(self.labels, self.precision, self.recall, self.f1, self.confusion.sum(axis=1))
        }
        return {
            "samples": self.total,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "misclassified": self.misclassified,
            "per_class": per_class,
            "confusion": self.confusion.tolist(),
            "confusion_normalized": self.normalized.tolist(),
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "report.txt").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        lines = ["true\\pred," + ",".join(self.labels)]
        lines += [name + "," + ",".join(str(int(v)) for v in row) for name, row in zip(self.labels, self.confusion)]
        (out_dir / "confusion.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def report_from_confusion(cm: np.ndarray, labels: Sequence[str]) -> EvalReport:
    """Per-class and macro metrics; empty denominators give 0."""
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot evaluate an empty set")
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    correct = int(np.trace(cm))
    return EvalReport(
        labels=tuple(labels),
        confusion=cm,
        accuracy=correct / int(total),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        misclassified=int(total) - correct,
    )


def evaluate(params, cfg: HyxnetConfig, data: EncodedSet, labels: LabelMap) -> EvalReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty set")
    if data.labels is None:
        raise ValueError("evaluation needs labeled events")
    pred = predict_proba(params, cfg, data.tokens, data.nums).argmax(axis=1)
    return report_from_confusion(confusion_matrix(data.labels, pred, cfg.k), labels.names)


def run_experiment(data_path, schema: FeatureSchema, config: TrainConfig, out_dir,
                   labels: Optional[LabelMap] = None, model_cfg: Optional[dict] = None,
                   delimiter: str = ",", lenient: bool = False) -> EvalReport:
    """Parse, split, fit the scaler on the training split, train, evaluate on the test split, persist.

    Writes ``model.hyxn``, ``train.log`` (one JSON record per epoch),
    ``timing.log`` (wall-clock seconds per epoch, kept apart so ``train.log``
    is reproducible byte for byte), ``report.txt`` and ``confusion.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parsed = parse_dataset(data_path, schema, labels, delimiter=delimiter, lenient=lenient)
    labels = parsed.labels
    tr, va, te = split_events(parsed.events, config.train_ratio, config.val_ratio, config.seed)
    if not te:
        raise TrainingError("test split is empty")
    log.info("split sizes: train=%d val=%d test=%d", len(tr), len(va), len(te))

    scaler = fit_scaler(np.array([e.numerics for e in tr]), schema.numeric_names)
    if scaler.constant:
        log.warning("zero-variance features: %s", [schema.numeric_names[i] for i in scaler.constant])
    cfg = HyxnetConfig(**{**(model_cfg or {}), "d_n": schema.d_n, "k": labels.k})
    train_set, val_set, test_set = (encode_events(s, scaler, cfg) for s in (tr, va, te))

    params = init_params(cfg, config.seed)
    start = time.perf_counter()
    with open(out_dir / "train.log", "w", encoding="utf-8") as flog, \
            open(out_dir / "timing.log", "w", encoding="utf-8") as ftime:

        def on_epoch(entry):
            flog.write(json.dumps(entry, sort_keys=True) + "\n")
            flog.flush()
            ftime.write(json.dumps({"epoch": entry["epoch"], "elapsed_s": round(time.perf_counter() - start, 3)}) + "\n")

        best, _ = train(params, cfg, train_set, val_set, config, on_epoch)

    meta = {"train": asdict(config), "split_sizes": [len(tr), len(va), len(te)]}
    save_checkpoint(out_dir / "model.hyxn", best, cfg, scaler, labels, schema, meta)
    report = evaluate(best, cfg, test_set, labels)
    report.write(out_dir)
    return report
