import io
import json

import numpy as np
import pytest

from hyxnet.encoder import fit_scaler
from hyxnet.ingest import FeatureSchema, format_log_line
from hyxnet.model import Checkpoint, HyxnetConfig, Prediction, init_params
from hyxnet.stream import Alert, Detector, bench, run_stream
from hyxnet.synth import SynthSpec, generate

SMALL = dict(num_buckets=256, d_emb=8, hidden=8, head=(16, 8))


@pytest.fixture(scope="module")
def corpus():
    return generate(SynthSpec.balanced(per_class=40, seed=11))


@pytest.fixture(scope="module")
def ckpt(corpus):
    events, labels = corpus
    cfg = HyxnetConfig(d_n=8, k=3, **SMALL)
    scaler = fit_scaler(np.array([e.numerics for e in events]), FeatureSchema.default().numeric_names)
    return Checkpoint(init_params(cfg, 0), cfg, scaler, labels, FeatureSchema.default())


def fixed_clock():
    return 1_700_000_000.0


def pred(label, conf, k=3):
    probs = np.full(k, (1 - conf) / (k - 1))
    probs[label] = conf
    return Prediction(probs, label, conf)


def test_alert_rules(ckpt, corpus):
    det = Detector(ckpt, threshold=0.5, clock=fixed_clock)
    ev = corpus[0][0]
    assert det.alert_for(ev, pred(0, 0.99)) is None  # normal is benign
    alert = det.alert_for(ev, pred(1, 0.99))
    assert alert == Alert(1_700_000_000.0, ev.qname, "dnscat2", 0.99, "block-recommend")
    assert det.alert_for(ev, pred(1, 0.40)) is None
    assert det.alert_for(ev, pred(2, 0.5)).action == "alert"


def test_benign_override(ckpt, corpus):
    det = Detector(ckpt, benign={"dnscat2"}, clock=fixed_clock)
    ev = corpus[0][0]
    assert det.alert_for(ev, pred(1, 0.99)) is None
    assert det.alert_for(ev, pred(0, 0.99)) is not None


def test_threshold_validation(ckpt):
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            Detector(ckpt, threshold=bad)


def lines_for(events):
    return [format_log_line(e, FeatureSchema.default()) + "\n" for e in events]


def test_empty_source(ckpt):
    s = run_stream([], Detector(ckpt))
    assert (s.processed, s.alerted, s.malformed, s.per_class) == (0, 0, 0, {})


def test_conservation(ckpt, corpus):
    lines = lines_for(corpus[0])
    s = run_stream(lines, Detector(ckpt, clock=fixed_clock))
    assert s.processed == len(lines)
    assert sum(s.per_class.values()) == len(lines)


def test_garbage_interleaving_is_skipped(ckpt, corpus):
    lines = lines_for(corpus[0][:60])
    noisy = []
    for i, line in enumerate(lines):
        noisy.append(line)
        if i % 7 == 0:
            noisy += ["garbage\n", "a.com|x|1|2|3|4|5|6|7\n", "\n"]
    clean_preds, noisy_preds = [], []
    a = run_stream(lines, Detector(ckpt, clock=fixed_clock), on_prediction=lambda e, p: clean_preds.append((e, p.probs)))
    b = run_stream(noisy, Detector(ckpt, clock=fixed_clock), on_prediction=lambda e, p: noisy_preds.append((e, p.probs)))
    assert b.malformed == 2 * len(range(0, 60, 7))
    assert a.processed == b.processed == 60
    assert [e for e, _ in clean_preds] == [e for e, _ in noisy_preds]
    for (_, p), (_, q) in zip(clean_preds, noisy_preds):
        np.testing.assert_array_equal(p, q)


def test_stream_output_is_pure(ckpt, corpus):
    lines = lines_for(corpus[0])
    outs = []
    for _ in range(2):
        sink = io.StringIO()
        run_stream(lines, Detector(ckpt, threshold=0.34, clock=fixed_clock), sink)
        outs.append(sink.getvalue())
    assert outs[0] == outs[1]
    assert outs[0]  # an untrained 3-class model still clears a 0.34 threshold somewhere


def test_alert_sink_respects_threshold(ckpt, corpus):
    sink = io.StringIO()
    det = Detector(ckpt, threshold=0.34, clock=fixed_clock)
    s = run_stream(lines_for(corpus[0]), det, sink)
    alerts = [json.loads(x) for x in sink.getvalue().splitlines()]
    assert len(alerts) == s.alerted
    assert all(a["confidence"] >= 0.34 and a["predicted"] != "normal" for a in alerts)


def test_schema_mismatch(ckpt):
    schema = FeatureSchema((("q", "qname"), ("a", "numeric")))
    with pytest.raises(ValueError):
        run_stream([], Detector(ckpt), schema=schema)


def test_bench_consistency(ckpt, corpus):
    events = corpus[0] * 10
    report = bench(events, Detector(ckpt), repetitions=3, warmup=20)
    assert report.samples == 1200 and len(report.rep_adt_ms) == 3
    assert sorted(report.rep_adt_ms)[1] == report.adt_ms
    assert report.throughput == pytest.approx(report.samples / report.total_s, rel=0.01)
    assert report.throughput * report.adt_ms / 1000 == pytest.approx(1, rel=0.05)
    assert report.p50_ms <= report.p99_ms


def test_bench_rejects_empty(ckpt):
    with pytest.raises(ValueError):
        bench([], Detector(ckpt))
