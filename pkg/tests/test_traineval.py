"""Training and evaluation tests: metric values on frozen confusion counts,
voting arithmetic against a brute-force voter, the cluster-separation index
against hand-computed centroids, and short smoke training runs on stub
samples (so nothing here depends on the slow full-size pipeline).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodulenas.archspace import parse_spec
from nodulenas.datasynth import VolumeSample
from nodulenas.network import NetConfig, build_network
from nodulenas.traineval import (ConfusionCounts, DivergenceError,
                                 EnsembleModel, TrainError, TrainParams,
                                 confusion_metrics, dbi, ensemble_predict,
                                 ensemble_sweep, evaluate_ensemble,
                                 evaluate_network, extract_feature_set,
                                 predict_probs, train_model, write_pgm,
                                 write_report)

SPEC = parse_spec("[[4],[4],[4]]")


def stub_samples(n, seed=0):
    """Tiny labelled volumes with a strong class signal: positives carry a
    bright center blob, negatives stay dim."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        vox = rng.random((32, 32, 32)) * 0.1
        if label:
            vox[12:20, 12:20, 12:20] += 0.8
        out.append(VolumeSample(np.clip(vox, 0, 1), label, f"stub-{i:03d}", i))
    return out


# ---------------------------------------------------------------- metrics

def test_confusion_metrics_frozen_values():
    m = confusion_metrics(ConfusionCounts(TP=8, FN=2, FP=1, TN=9))
    assert abs(m["accuracy"] - 0.85) < 1e-9
    assert abs(m["sensitivity"] - 0.8) < 1e-9
    assert abs(m["specificity"] - 0.9) < 1e-9
    assert abs(m["f1"] - 16 / 19) < 1e-9


def test_confusion_metrics_empty_denominators():
    m = confusion_metrics(ConfusionCounts(TP=0, FN=0, FP=2, TN=3))
    assert m["sensitivity"] is None
    assert m["f1"] == 0.0
    m = confusion_metrics(ConfusionCounts(TP=0, FN=0, FP=0, TN=0))
    assert all(v is None for v in m.values())
    with pytest.raises(TrainError):
        ConfusionCounts(TP=-1, FN=0, FP=0, TN=0)


@settings(max_examples=200, deadline=None)
@given(*(st.integers(0, 50) for _ in range(4)))
def test_f1_identity(tp, fn, fp, tn):
    """F1 == harmonic mean of precision and sensitivity wherever defined."""
    m = confusion_metrics(ConfusionCounts(tp, fn, fp, tn))
    if tp + fp > 0 and tp + fn > 0 and tp > 0:
        prec = tp / (tp + fp)
        sens = tp / (tp + fn)
        assert abs(m["f1"] - 2 * prec * sens / (prec + sens)) < 1e-12


def test_counts_from_predictions():
    c = ConfusionCounts.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.TP, c.FN, c.FP, c.TN) == (2, 1, 1, 1)


# ---------------------------------------------------------------- dbi

def test_dbi_hand_computed():
    f = {0: np.array([[0.0, 0.0], [2.0, 0.0]]),
         1: np.array([[5.0, 0.0], [5.0, 2.0]])}
    out = dbi(f)
    # centroids (1,0) and (5,1); spreads 1 and 1; separation sqrt(17)
    assert abs(out["S0"] - 1.0) < 1e-12
    assert abs(out["S1"] - 1.0) < 1e-12
    assert abs(out["M01"] - math.sqrt(17)) < 1e-12
    assert abs(out["dbi"] - 2 / math.sqrt(17)) < 1e-12


def test_dbi_rigid_motion_invariance():
    rng = np.random.default_rng(0)
    f = {0: rng.normal(0, 1, (20, 4)), 1: rng.normal(3, 1, (15, 4))}
    base = dbi(f)["dbi"]
    # random rotation + translation preserves all Euclidean distances
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    t = rng.normal(0, 5, 4)
    moved = {k: v @ q + t for k, v in f.items()}
    assert abs(dbi(moved)["dbi"] - base) < 1e-9


def test_dbi_errors():
    with pytest.raises(TrainError):
        dbi({0: np.zeros((0, 2)), 1: np.ones((3, 2))})
    with pytest.raises(TrainError):
        dbi({0: np.ones((3, 2)), 1: np.ones((3, 2))})  # coincident centroids


# ---------------------------------------------------------------- voting

class FixedNet:
    """Stand-in network that returns a preset probability per sample id."""

    def __init__(self, probs):
        self.probs = probs

    def predict_proba(self, voxels):
        return self.probs["single"]

    def forward(self, x, train=False):
        raise AssertionError("unused")


def test_ensemble_requires_odd_membership():
    with pytest.raises(TrainError):
        EnsembleModel([])
    with pytest.raises(TrainError):
        EnsembleModel([FixedNet({"single": 0.5})] * 2)


def test_ensemble_predict_majority():
    members = [FixedNet({"single": p}) for p in (0.9, 0.8, 0.1)]
    out = ensemble_predict(EnsembleModel(members), np.zeros((32, 32, 32)))
    assert out["label"] == 1 and out["member_labels"] == [1, 1, 0]
    members = [FixedNet({"single": p}) for p in (0.9, 0.2, 0.1)]
    out = ensemble_predict(EnsembleModel(members), np.zeros((32, 32, 32)))
    assert out["label"] == 0


class TableNet:
    """predict_probs-compatible net: class-1 probability looked up by id."""

    def __init__(self, table):
        self.table = table

    def forward(self, x, train=False):
        raise AssertionError("patched out")


def test_evaluate_ensemble_matches_brute_vote(monkeypatch):
    rng = np.random.default_rng(1)
    samples = stub_samples(12)
    nets = []
    tables = []
    for _ in range(5):
        t = {s.id: rng.random() for s in samples}
        tables.append(t)
        nets.append(TableNet(t))

    def fake_probs(network, ss, batch_size=32):
        return np.array([network.table[s.id] for s in ss])

    import nodulenas.traineval as te
    monkeypatch.setattr(te, "predict_probs", fake_probs)
    counts = te.evaluate_ensemble(EnsembleModel(nets), samples)
    # brute-force vote
    correct = 0
    tp = fn = fp = tn = 0
    for s in samples:
        votes = sum(int(t[s.id] >= 0.5) for t in tables)
        pred = int(votes >= 3)
        tp += (s.label == 1 and pred == 1)
        fn += (s.label == 1 and pred == 0)
        fp += (s.label == 0 and pred == 1)
        tn += (s.label == 0 and pred == 0)
    assert (counts.TP, counts.FN, counts.FP, counts.TN) == (tp, fn, fp, tn)


def test_ensemble_sweep_validation_and_shape(monkeypatch):
    samples = stub_samples(8)
    rng = np.random.default_rng(2)
    nets = [TableNet({s.id: rng.random() for s in samples}) for _ in range(9)]

    def fake_probs(network, ss, batch_size=32):
        return np.array([network.table[s.id] for s in ss])

    import nodulenas.traineval as te
    monkeypatch.setattr(te, "predict_probs", fake_probs)
    rows = te.ensemble_sweep(nets, samples, sizes=(1, 3, 5), repeats=4, seed=0)
    assert [r["n"] for r in rows] == [1, 3, 5]
    for r in rows:
        assert 0.0 <= r["accuracy"] <= 1.0
    with pytest.raises(TrainError):
        te.ensemble_sweep(nets, samples, sizes=(11,))
    with pytest.raises(TrainError):
        te.ensemble_sweep(nets, samples, sizes=(2,))


# ---------------------------------------------------------------- training

def test_train_model_learns_stub_task():
    train = stub_samples(16, seed=0)
    val = stub_samples(8, seed=1)
    params = TrainParams(batch_size=8, augment=False, lr=1e-3)
    # high normalization momentum: with only a couple of optimizer steps per
    # epoch the running statistics must catch up quickly for eval mode to work
    result = train_model(SPEC, NetConfig(bn_momentum=0.5), train, val,
                         epochs=5, seed=0, params=params)
    assert len(result.history) == 5
    assert all(math.isfinite(h["loss"]) for h in result.history)
    assert result.best_val_accuracy == max(h["val_accuracy"]
                                           for h in result.history)
    counts = evaluate_network(result.network, val)
    acc = confusion_metrics(counts)["accuracy"]
    # the bright-blob stub task is nearly separable even after 3 epochs
    assert acc >= 0.75


def test_train_model_deterministic():
    train = stub_samples(8, seed=3)
    params = TrainParams(batch_size=4, augment=True)
    r1 = train_model(SPEC, NetConfig(), train, [], epochs=1, seed=7, params=params)
    r2 = train_model(SPEC, NetConfig(), train, [], epochs=1, seed=7, params=params)
    assert r1.history[0]["loss"] == r2.history[0]["loss"]
    from nodulenas.network import flatten_params
    np.testing.assert_array_equal(flatten_params(r1.network),
                                  flatten_params(r2.network))


def test_train_model_empty_val_and_empty_train():
    train = stub_samples(4)
    result = train_model(SPEC, NetConfig(), train, [], epochs=1,
                         params=TrainParams(batch_size=4, augment=False))
    assert result.best_val_accuracy == 0.0
    assert result.history[0]["val_accuracy"] is None
    with pytest.raises(TrainError):
        train_model(SPEC, NetConfig(), [], [], epochs=1)


def test_train_model_divergence_reported():
    # normalization keeps even absurd learning rates finite, so inject the
    # non-finite value at the input instead
    train = stub_samples(4)
    train[0].voxels = train[0].voxels.copy()
    train[0].voxels[0, 0, 0] = np.nan
    params = TrainParams(batch_size=4, augment=False)
    with pytest.raises(DivergenceError) as exc:
        train_model(SPEC, NetConfig(), train, [], epochs=2, params=params)
    assert exc.value.epoch == 0


def test_predict_probs_batching_consistent():
    net = build_network(SPEC, NetConfig(), seed=0)
    samples = stub_samples(5)
    a = predict_probs(net, samples, batch_size=2)
    b = predict_probs(net, samples, batch_size=5)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.all((a >= 0) & (a <= 1))


def test_extract_feature_set_groups_by_label():
    net = build_network(SPEC, NetConfig(), seed=0)
    samples = stub_samples(6)
    feats = extract_feature_set(net, samples)
    assert feats[0].shape == (3, 4) and feats[1].shape == (3, 4)


# ---------------------------------------------------------------- exports

def test_write_pgm_and_report(tmp_path):
    img = np.arange(6, dtype=np.uint8).reshape(2, 3)
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    blob = p.read_bytes()
    assert blob.startswith(b"P5\n3 2\n255\n")
    assert blob[-6:] == img.tobytes()
    rp = tmp_path / "r.txt"
    write_report(rp, {"run": {"accuracy": 0.9, "sensitivity": None}})
    text = rp.read_text()
    assert "[run]" in text and "accuracy = 0.9" in text
    assert "sensitivity = undefined" in text
