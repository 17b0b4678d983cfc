import json
import math

import numpy as np
import pytest

from hyxnet.encoder import fit_scaler
from hyxnet.ingest import DnsEvent, FeatureSchema, LabelMap, write_dataset
from hyxnet.model import HyxnetConfig, init_params, load_checkpoint, predict_proba
from hyxnet.synth import SynthSpec, generate
from hyxnet.trainer import (
    EncodedSet,
    TrainConfig,
    TrainingError,
    confusion_matrix,
    encode_events,
    evaluate,
    report_from_confusion,
    run_experiment,
    train,
)

SMALL = dict(num_buckets=256, d_emb=8, hidden=8, head=(16, 8))


def separable_set(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    nums = rng.normal(size=(n, 2))
    nums[:, 0] += np.where(y == 1, 2.5, -2.5)
    tokens = np.zeros((n, 15), np.int32)
    tokens[:, -2:] = rng.integers(1, 256, size=(n, 2))
    return EncodedSet(tokens, nums.astype(np.float32), y.astype(np.int64))


def test_separable_two_class_fit():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(200, 0)
    val = separable_set(60, 1)
    params = init_params(cfg, 0)
    best, history = train(params, cfg, data, val, TrainConfig(batch_size=32, max_epochs=20))
    assert len(history) <= 21
    acc = (predict_proba(best, cfg, data.tokens, data.nums).argmax(1) == data.labels).mean()
    assert acc >= 0.99


@pytest.mark.parametrize("k", [2, 12])
def test_epoch_zero_loss_near_ln_k(k):
    cfg = HyxnetConfig(d_n=2, k=k, **SMALL)
    data = separable_set(120, 2)
    data.labels = np.arange(120) % k
    _, history = train(init_params(cfg, 0), cfg, data, data, TrainConfig(max_epochs=0))
    assert history[0]["epoch"] == 0
    assert abs(history[0]["train_loss"] - math.log(k)) <= 0.1 * math.log(k)


def test_training_reduces_loss_and_logs():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(100, 3)
    _, history = train(init_params(cfg, 1), cfg, data, data, TrainConfig(batch_size=25, max_epochs=5))
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert set(history[0]) == {"epoch", "train_loss", "val_loss", "lr", "clipped_batches"}
    assert [h["epoch"] for h in history] == list(range(len(history)))


def test_training_is_deterministic():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(64, 4)
    runs = []
    for _ in range(2):
        best, history = train(init_params(cfg, 5), cfg, data, data, TrainConfig(batch_size=16, max_epochs=3, seed=5))
        runs.append((best, history))
    assert runs[0][1] == runs[1][1]
    for name in runs[0][0]:
        assert runs[0][0][name].tobytes() == runs[1][0][name].tobytes()


def test_early_stop_returns_best_epoch():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(64, 6)
    # validation labels are the opposite of training ones, so validation loss only gets worse
    flipped = EncodedSet(data.tokens, data.nums, 1 - data.labels)
    params = init_params(cfg, 0)
    start = {n: v.copy() for n, v in params.items()}
    best, history = train(params, cfg, data, flipped, TrainConfig(batch_size=16, max_epochs=50))
    assert len(history) - 1 < 50
    best_epoch = min(range(len(history)), key=lambda i: history[i]["val_loss"])
    if best_epoch == 0:
        for name in start:
            np.testing.assert_array_equal(best[name], start[name])


def test_train_rejects_empty():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(4, 0)
    with pytest.raises(TrainingError):
        train(init_params(cfg, 0), cfg, data, data.subset(np.array([], int)), TrainConfig())


# -- metrics ------------------------------------------------------------------


def test_binary_metric_example():
    cm = np.array([[9, 2], [1, 8]])  # class 1 is the positive class: TP 8, FP 2, FN 1, TN 9
    r = report_from_confusion(cm, ("neg", "pos"))
    assert r.precision[1] == pytest.approx(0.8)
    assert r.recall[1] == pytest.approx(8 / 9)
    assert r.f1[1] == pytest.approx(0.8421, abs=1e-4)
    assert r.accuracy == pytest.approx(17 / 20)


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1, 0])
    r = report_from_confusion(confusion_matrix(y, y, 3), "abc")
    assert r.accuracy == 1 and r.macro_f1 == 1 and r.misclassified == 0
    np.testing.assert_array_equal(r.precision, 1)


def test_empty_class_metrics_are_zero():
    r = report_from_confusion(confusion_matrix([0, 0, 1], [0, 0, 0], 3), "abc")
    assert r.precision[2] == 0 and r.recall[2] == 0 and r.f1[2] == 0
    assert r.recall[1] == 0


def reference_metrics(y_true, y_pred, k):
    out = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_reference(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(3, size=200)
    p = np.where(rng.random(200) < 0.7, y, rng.integers(3, size=200))
    r = report_from_confusion(confusion_matrix(y, p, 3), "abc")
    ref = reference_metrics(y.tolist(), p.tolist(), 3)
    for c in range(3):
        assert (r.precision[c], r.recall[c], r.f1[c]) == pytest.approx(ref[c], abs=1e-12)
    assert r.macro_f1 == pytest.approx(sum(x[2] for x in ref) / 3, abs=1e-12)
    assert r.confusion.sum() == 200
    np.testing.assert_allclose(r.normalized.sum(axis=1), 1)


# -- end to end ---------------------------------------------------------------


def _corpus(tmp_path, per_class=60, seed=0):
    events, labels = generate(SynthSpec.balanced(per_class=per_class, seed=seed))
    path = tmp_path / "data.csv"
    write_dataset(path, events, FeatureSchema.default(), labels)
    return path, events, labels


def test_run_experiment_artifacts(tmp_path):
    path, _, labels = _corpus(tmp_path)
    out = tmp_path / "run"
    report = run_experiment(path, FeatureSchema.default(), TrainConfig(batch_size=32, max_epochs=3), out, model_cfg=SMALL)
    for name in ("model.hyxn", "train.log", "timing.log", "report.txt", "confusion.csv"):
        assert (out / name).is_file()
    records = [json.loads(line) for line in (out / "train.log").read_text().splitlines()]
    assert [r["epoch"] for r in records] == list(range(len(records)))
    ck = load_checkpoint(out / "model.hyxn")
    assert ck.labels == labels and ck.config.k == 3 and ck.config.d_n == 8
    assert ck.meta["split_sizes"] == [108, 36, 36]
    assert json.loads((out / "report.txt").read_text())["samples"] == report.total == 36
    assert (out / "confusion.csv").read_text().splitlines()[0] == "true\\pred,normal,dnscat2,iodine"


def test_split_sweep_train_sizes(tmp_path):
    path, _, _ = _corpus(tmp_path, per_class=40)
    sizes = []
    for ratio in (0.6, 0.4, 0.2, 0.1):
        out = tmp_path / f"r{ratio}"
        run_experiment(path, FeatureSchema.default(), TrainConfig(batch_size=64, max_epochs=1, train_ratio=ratio),
                       out, model_cfg=SMALL)
        assert (out / "report.txt").is_file()
        sizes.append(load_checkpoint(out / "model.hyxn").meta["split_sizes"][0])
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[0] > sizes[-1]


def test_test_split_perturbation_does_not_leak(tmp_path):
    from hyxnet.ingest import parse_dataset, split_events

    path, events, labels = _corpus(tmp_path, per_class=30)
    config = TrainConfig(batch_size=32, max_epochs=2)
    _, _, test = split_events(events, config.train_ratio, config.val_ratio, config.seed)
    test_ids = {id(e) for e in test}
    perturbed = [
        DnsEvent(e.qname, tuple(v * 1000 + 77 for v in e.numerics), e.label) if id(e) in test_ids else e
        for e in events
    ]
    moved = [p for p, e in zip(perturbed, events) if id(e) in test_ids]
    path2 = tmp_path / "perturbed.csv"
    write_dataset(path2, perturbed, FeatureSchema.default(), labels)
    # the perturbed rows land in exactly the same test split
    reparsed = parse_dataset(path2, FeatureSchema.default()).events
    assert sorted(split_events(reparsed, 0.6, 0.2, 0)[2], key=repr) == sorted(moved, key=repr)

    run_experiment(path, FeatureSchema.default(), config, tmp_path / "a", model_cfg=SMALL)
    run_experiment(path2, FeatureSchema.default(), config, tmp_path / "b", model_cfg=SMALL)
    a, b = load_checkpoint(tmp_path / "a" / "model.hyxn"), load_checkpoint(tmp_path / "b" / "model.hyxn")
    np.testing.assert_array_equal(a.scaler.mean, b.scaler.mean)
    np.testing.assert_array_equal(a.scaler.std, b.scaler.std)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    assert (tmp_path / "a" / "train.log").read_bytes() == (tmp_path / "b" / "train.log").read_bytes()


def test_encode_events_standardizes_with_given_scaler():
    events = [DnsEvent("a.com", (1.0, 10.0), 0), DnsEvent("b.b.org", (3.0, 30.0), 1)]
    scaler = fit_scaler([[1.0, 10.0], [3.0, 30.0]])
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    enc = encode_events(events, scaler, cfg)
    np.testing.assert_allclose(enc.nums, [[-1, -1], [1, 1]])
    assert enc.tokens.shape == (2, 15) and enc.labels.tolist() == [0, 1]


def test_evaluate_uses_labels():
    cfg = HyxnetConfig(d_n=2, k=2, **SMALL)
    data = separable_set(10, 0)
    r = evaluate(init_params(cfg, 0), cfg, data, LabelMap(("a", "b")))
    assert r.total == 10 and r.labels == ("a", "b")
