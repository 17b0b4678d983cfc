"""Online detection: per-record classification, threshold alerting, benchmarking."""

from __future__ import annotations

import json
import logging
import resource
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence, TextIO

import numpy as np

from .encoder import tokenize, transform
from .ingest import DnsEvent, FeatureSchema, IngestError, parse_log_line
from .model import Checkpoint, Prediction, Predictor

log = logging.getLogger(__name__)

DEFAULT_BENIGN = frozenset({"normal", "wildcard"})
ALERT = "alert"
BLOCK = "block-recommend"


@dataclass
class Alert:
    timestamp: float
    qname: str
    predicted: str
    confidence: float
    action: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Detector:
    """Frozen model plus alerting policy.

    An alert is raised when the predicted class is outside ``benign`` and its
    probability reaches ``threshold``; predictions at or above
    ``block_threshold`` are marked as block recommendations. The detector keeps
    no per-domain state, so instances can be shared between streams.
    """

    def __init__(self, ckpt: Checkpoint, threshold: float = 0.5, benign: Optional[Iterable[str]] = None,
                 block_threshold: float = 0.99, clock: Callable[[], float] = time.time):
        if not 0 < threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {threshold}")
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.labels = ckpt.labels
        self.scaler = ckpt.scaler
        self.threshold = threshold
        self.block_threshold = max(block_threshold, threshold)
        names = DEFAULT_BENIGN if benign is None else frozenset(benign)
        self.benign = frozenset(i for i, n in enumerate(self.labels.names) if n in names)
        self.clock = clock
        self._predict = Predictor(ckpt.params, ckpt.config)

    def encode(self, event: DnsEvent):
        if len(event.numerics) != self.scaler.d_n:
            raise IngestError(f"event has {len(event.numerics)} numeric features, model expects {self.scaler.d_n}")
        return tokenize(event.qname, self.cfg.seq_len, self.cfg.num_buckets), transform(event.numerics, self.scaler)

    def classify(self, event: DnsEvent) -> Prediction:
        tokens, nums = self.encode(event)
        return self._predict(tokens, nums)

    def alert_for(self, event: DnsEvent, pred: Prediction) -> Optional[Alert]:
        if pred.label in self.benign or pred.confidence < self.threshold:
            return None
        action = BLOCK if pred.confidence >= self.block_threshold else ALERT
        return Alert(self.clock(), event.qname, self.labels.name(pred.label), pred.confidence, action)

    def detect(self, event: DnsEvent) -> tuple[Prediction, Optional[Alert]]:
        pred = self.classify(event)
        return pred, self.alert_for(event, pred)


@dataclass
class StreamSummary:
    processed: int = 0
    alerted: int = 0
    malformed: int = 0
    per_class: dict[str, int] = field(default_factory=dict)


def run_stream(lines: Iterable[str], detector: Detector, sink: Optional[TextIO] = None,
               schema: Optional[FeatureSchema] = None, delimiter: str = "|",
               on_prediction: Optional[Callable[[DnsEvent, Prediction], None]] = None) -> StreamSummary:
    """Classify records one at a time, writing alerts to ``sink`` as JSON lines.

    Malformed lines are counted and skipped. Blank lines are ignored.
    """
    schema = schema or detector.ckpt.schema
    if schema is None:
        raise ValueError("no schema given and the checkpoint carries none")
    if schema.d_n != detector.scaler.d_n:
        raise ValueError(f"schema has {schema.d_n} numeric columns, model expects {detector.scaler.d_n}")
    summary = StreamSummary()
    counts: Counter = Counter()
    for line in lines:
        if not line.strip():
            continue
        try:
            event = parse_log_line(line, schema, delimiter)
        except IngestError as exc:
            summary.malformed += 1
            log.debug("skipping malformed line: %s", exc)
            continue
        pred, alert = detector.detect(event)
        summary.processed += 1
        counts[pred.label] += 1
        if on_prediction is not None:
            on_prediction(event, pred)
        if alert is not None:
            summary.alerted += 1
            if sink is not None:
                sink.write(alert.to_json() + "\n")
                sink.flush()
    summary.per_class = {detector.labels.name(k): counts[k] for k in sorted(counts)}
    if summary.malformed:
        log.warning("skipped %d malformed line(s)", summary.malformed)
    return summary


@dataclass
class BenchReport:
    """Per-record detection latency; ADT here is pure encode + forward compute time.

    The windowed latency of a deployment would add the time to fill a window
    of T events; that depends on traffic rate and is not measured here.
    """

    samples: int
    repetitions: int
    adt_ms: float  # median over repetitions of the per-sample mean
    p50_ms: float
    p99_ms: float
    throughput: float  # samples / s in the median repetition
    total_s: float
    peak_rss_mb: float
    rep_adt_ms: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def peak_rss_mb() -> float:
    # ru_maxrss is in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench(events: Sequence[DnsEvent], detector: Detector, repetitions: int = 3, warmup: int = 200) -> BenchReport:
    """Time encode + forward for every event, ``repetitions`` times after a warm-up pass."""
    if len(events) < 1000:
        log.warning("benchmark over %d samples; at least 1000 recommended", len(events))
    if not events or repetitions < 1:
        raise ValueError("need at least one event and one repetition")
    for ev in events[:warmup]:
        detector.classify(ev)
    reps, walls = [], []
    clock = time.perf_counter_ns
    for _ in range(repetitions):
        lat = np.empty(len(events), dtype=np.int64)
        start = clock()
        for j, ev in enumerate(events):
            t0 = clock()
            detector.classify(ev)
            lat[j] = clock() - t0
        walls.append(clock() - start)
        reps.append(lat)
    means = [float(r.mean()) for r in reps]
    mid = sorted(range(repetitions), key=lambda i: means[i])[(repetitions - 1) // 2]
    lat = reps[mid]
    # wall time of the whole pass, so throughput includes loop overhead
    total_s = walls[mid] / 1e9
    return BenchReport(
        samples=len(events),
        repetitions=repetitions,
        adt_ms=means[mid] / 1e6,
        p50_ms=float(np.percentile(lat, 50)) / 1e6,
        p99_ms=float(np.percentile(lat, 99)) / 1e6,
        throughput=len(events) / total_s,
        total_s=total_s,
        peak_rss_mb=peak_rss_mb(),
        rep_adt_ms=[m / 1e6 for m in means],
    )
