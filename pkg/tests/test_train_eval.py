"""Optimizer arithmetic, metric oracles, training behavior, checkpoints."""

import json
import math
import struct
from types import SimpleNamespace

import numpy as np
import pytest

import crossfit.autodiff as ad
from crossfit.autodiff import ContractError, Tensor, make_rng, parameter
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.train_eval import (
    Checkpoint, CheckpointError, MetricsReport, TrainConfig, TrainingDiverged,
    build_model_from_checkpoint, evaluate, load_checkpoint,
    metrics_from_predictions, quadratic_weighted_kappa, roc_auc_ovr,
    save_checkpoint, sgd_momentum_step, train,
)


def kappa_oracle(conf):
    """Direct loop evaluation of the weighted-agreement formula."""
    c = len(conf)
    total = float(sum(sum(row) for row in conf))
    rows = [float(sum(conf[i])) for i in range(c)]
    cols = [float(sum(conf[i][j] for i in range(c))) for j in range(c)]
    num = den = 0.0
    for i in range(c):
        for j in range(c):
            w = (i - j) ** 2 / (c - 1) ** 2
            num += w * conf[i][j]
            den += w * rows[i] * cols[j] / total
    return 1.0 - num / den if den else 1.0


def auc_oracle(scores, positives):
    """All-pairs concordance count."""
    pos = [s for s, y in zip(scores, positives) if y]
    neg = [s for s, y in zip(scores, positives) if not y]
    if not pos or not neg:
        return None
    wins = 0.0
    for sp in pos:
        for sn in neg:
            wins += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return wins / (len(pos) * len(neg))


def micro_model(seed=0, **cfg_kw):
    base = dict(
        encoder=EncoderConfig(stage_channels=(4, 6), input_size=16),
        cfa=CfaConfig(layers=1, heads=2, d_t=8, mlp_ratio=2, threshold=0.06),
        num_classes=3)
    base.update(cfg_kw)
    return CrossFiTModel(make_rng(seed), CrossFiTConfig(**base))


def tiny_dataset(seed, n=8, s=16, classes=3):
    rng = make_rng(seed)
    return SimpleNamespace(
        images1=rng.uniform(size=(n, s, s, 3)),
        images2=rng.uniform(size=(n, s, s, 3)),
        od1=rng.uniform(0.2, 0.8, size=(n, 2)),
        od2=rng.uniform(0.2, 0.8, size=(n, 2)),
        grades=rng.integers(0, classes, size=n),
        split_evidence=np.zeros(n, dtype=bool),
        eye_ids=np.arange(n))


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_plain_descent():
    p = parameter([1.0, -2.0])
    p.grad = np.array([0.5, 0.25])
    v = {"p": np.zeros(2)}
    sgd_momentum_step({"p": p}, v, TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.95, -2.025], atol=1e-15)


def test_sgd_no_gradient_no_motion():
    p = parameter([3.0])
    p.grad = np.array([0.0])
    v = {"p": np.zeros(1)}
    sgd_momentum_step({"p": p}, v, TrainConfig(lr=0.5, momentum=0.9, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [3.0])


def test_sgd_two_step_hand_unroll():
    lr, mu, wd = 0.1, 0.9, 0.01
    theta, vel = 2.0, 0.0
    grads = [0.3, -0.7]
    for g in grads:
        vel = mu * vel + g + wd * theta
        theta = theta - lr * vel
    p = parameter([2.0])
    v = {"p": np.zeros(1)}
    cfg = TrainConfig(lr=lr, momentum=mu, weight_decay=wd)
    for g in grads:
        p.grad = np.array([g])
        sgd_momentum_step({"p": p}, v, cfg)
    assert abs(p.data[0] - theta) <= 1e-12


def test_weight_decay_shrinks_without_gradient():
    p = parameter(make_rng(0).normal(size=6))
    before = np.linalg.norm(p.data)
    p.grad = np.zeros(6)
    v = {"p": np.zeros(6)}
    sgd_momentum_step({"p": p}, v, TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.1))
    assert np.linalg.norm(p.data) < before


def test_train_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    TrainConfig(lr=0.0)  # explicitly allowed


# ---------------------------------------------------------------------------
# kappa


def test_kappa_perfect_agreement():
    assert quadratic_weighted_kappa(np.diag([3, 1, 4])) == 1.0
    assert quadratic_weighted_kappa(np.array([[7]])) == 1.0


def test_kappa_chance_level_hand_example():
    assert abs(quadratic_weighted_kappa(np.array([[10, 0], [10, 0]]))) <= 1e-15


def test_kappa_three_class_vs_oracle():
    conf = [[2, 1, 0], [0, 2, 0], [0, 1, 2]]
    got = quadratic_weighted_kappa(np.array(conf))
    assert abs(got - kappa_oracle(conf)) <= 1e-12


def test_kappa_random_and_scaling_invariance():
    rng = make_rng(1)
    for _ in range(30):
        c = int(rng.integers(2, 6))
        conf = rng.integers(0, 9, size=(c, c))
        if conf.sum() == 0:
            conf[0, 0] = 1
        k = quadratic_weighted_kappa(conf)
        assert abs(k - kappa_oracle(conf.tolist())) <= 1e-12
        assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
        assert abs(quadratic_weighted_kappa(conf * 7) - k) <= 1e-12


def test_kappa_empty_rejected():
    with pytest.raises(ContractError):
        quadratic_weighted_kappa(np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# AUC


def test_auc_perfect_separation():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    assert roc_auc_ovr(scores, np.array([1, 1, 0, 0], bool)) == 1.0


def test_auc_all_ties():
    scores = np.full(6, 0.5)
    labels = np.array([1, 0, 1, 0, 1, 0], bool)
    assert roc_auc_ovr(scores, labels) == 0.5


def test_auc_hand_example():
    got = roc_auc_ovr(np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, 0, 1, 0], bool))
    assert abs(got - 0.75) <= 1e-15


def test_auc_single_class_undefined():
    assert roc_auc_ovr(np.array([0.1, 0.9]), np.array([1, 1], bool)) is None
    assert roc_auc_ovr(np.array([0.1, 0.9]), np.array([0, 0], bool)) is None


def test_auc_random_vs_pair_counting():
    rng = make_rng(2)
    for _ in range(30):
        n = int(rng.integers(3, 40))
        scores = np.round(rng.uniform(size=n), 2)  # induce ties
        labels = rng.uniform(size=n) < 0.5
        want = auc_oracle(scores.tolist(), labels.tolist())
        got = roc_auc_ovr(scores, labels)
        if want is None:
            assert got is None
        else:
            assert abs(got - want) <= 1e-12


# ---------------------------------------------------------------------------
# report assembly


def test_metrics_oracle_predictions():
    labels = np.array([0, 1, 2, 1, 0, 2, 2])
    probs = np.zeros((7, 3))
    probs[np.arange(7), labels] = 1.0
    rep = metrics_from_predictions(labels, labels.copy(), probs, 3)
    assert rep.kappa == 1.0 and rep.accuracy == 1.0
    assert all(a == 1.0 for a in rep.per_class_auc)
    assert rep.confusion.sum(axis=1).tolist() == [2, 2, 3]


def test_metrics_constant_predictor():
    labels = np.array([0] * 12 + [1] * 5 + [2] * 3)
    grades = np.zeros(20, dtype=np.int64)
    probs = np.tile([0.8, 0.1, 0.1], (20, 1))
    rep = metrics_from_predictions(labels, grades, probs, 3)
    assert abs(rep.accuracy - 0.6) <= 1e-15  # majority share
    assert rep.kappa <= 0.0


def test_metrics_missing_class_warns_and_excludes():
    labels = np.array([0, 0, 1, 1])
    grades = np.array([0, 1, 1, 1])
    probs = np.tile([0.5, 0.3, 0.2], (4, 1))
    with pytest.warns(UserWarning, match="class 2"):
        rep = metrics_from_predictions(labels, grades, probs, 3)
    assert rep.per_class_auc[2] is None
    defined = [a for a in rep.per_class_auc if a is not None]
    assert abs(rep.macro_auc - np.mean(defined)) <= 1e-15


def test_report_json_shape():
    rep = MetricsReport(0.5, 0.75, 0.8, [0.8, None], np.eye(2, dtype=np.int64), 4)
    d = rep.to_dict()
    parsed = json.loads(json.dumps(d))
    assert set(parsed) == {"kappa", "accuracy", "macro_auc", "per_class_auc",
                           "confusion", "n_samples"}
    assert parsed["per_class_auc"][1] is None


# ---------------------------------------------------------------------------
# training loop


def test_train_lr_zero_freezes_parameters():
    model = micro_model(3)
    before = {n: p.data.copy() for n, p in model.parameters()}
    cfg = TrainConfig(lr=0.0, momentum=0.9, weight_decay=1e-5,
                      batch_size=4, epochs=2, seed=1)
    train(model, tiny_dataset(4), cfg)
    for n, p in model.parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_train_single_sample_overfit():
    model = micro_model(5)
    data = tiny_dataset(6, n=1)
    cfg = TrainConfig(lr=0.05, momentum=0.9, weight_decay=0.0,
                      batch_size=1, epochs=200, seed=2, hflip=False)
    _, history = train(model, data, cfg)
    assert history[-1] < 0.05, f"failed to overfit one sample: {history[-1]:.4f}"


def test_train_deterministic_given_seed():
    cfg = TrainConfig(lr=0.01, momentum=0.9, weight_decay=1e-5,
                      batch_size=4, epochs=3, seed=7)
    _, h1 = train(micro_model(8), tiny_dataset(9), cfg)
    _, h2 = train(micro_model(8), tiny_dataset(9), cfg)
    assert h1 == h2


def test_train_divergence_aborts():
    model = micro_model(10)
    cfg = TrainConfig(lr=1e9, momentum=0.9, weight_decay=0.0,
                      batch_size=4, epochs=50, seed=3, hflip=False)
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        train(model, tiny_dataset(11), cfg)
    assert len(ad.active_tape()) == 0


def test_evaluate_populates_report():
    model = micro_model(12)
    data = tiny_dataset(13, n=10)
    rep = evaluate(model, data, batch_size=4)
    assert rep.n_samples == 10
    assert rep.confusion.sum() == 10
    counts = np.bincount(data.grades, minlength=3)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), counts)
    recomputed = np.trace(rep.confusion) / rep.confusion.sum()
    assert rep.accuracy == recomputed


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = micro_model(14)
    data = tiny_dataset(15, n=4)
    cfg = TrainConfig(lr=0.01, momentum=0.9, weight_decay=1e-5,
                      batch_size=2, epochs=1, seed=4)
    ckpt, _ = train(model, data, cfg)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.step == ckpt.step
    assert loaded.config == json.loads(json.dumps(ckpt.config))
    assert list(loaded.tensors) == list(ckpt.tensors)
    for name in ckpt.tensors:
        assert loaded.tensors[name].tobytes() == ckpt.tensors[name].tobytes(), name
    assert any(name.startswith("vel/") for name in loaded.tensors)


def test_checkpoint_restore_reproduces_predictions(tmp_path):
    model = micro_model(16)
    data = tiny_dataset(17, n=4)
    ckpt, _ = train(model, data, TrainConfig(lr=0.01, batch_size=2, epochs=1, seed=5))
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt, path)
    clone = build_model_from_checkpoint(load_checkpoint(path))
    a = model.predict_batch(data.images1, data.images2, data.od1, data.od2)
    b = clone.predict_batch(data.images1, data.images2, data.od1, data.od2)
    # stored weights are float32; both models then run in the default dtype,
    # so grades agree even though the trained f64 state was quantized
    assert [p.grade for p in a] == [p.grade for p in b]


def test_checkpoint_truncation_detected(tmp_path):
    ckpt = Checkpoint.from_model(micro_model(18))
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(ckpt, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_corrupt_index_names_tensor(tmp_path):
    ckpt = Checkpoint.from_model(micro_model(19))
    path = str(tmp_path / "c.ckpt")
    save_checkpoint(ckpt, path)
    blob = open(path, "rb").read()
    (hlen,) = struct.unpack("<I", blob[6:10])
    header = json.loads(blob[10:10 + hlen].decode())
    victim = header["tensors"][2]
    victim["length"] += 4
    new_header = json.dumps(header).encode()
    open(path, "wb").write(blob[:6] + struct.pack("<I", len(new_header))
                           + new_header + blob[10 + hlen:])
    with pytest.raises(CheckpointError, match=victim["name"]):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path = str(tmp_path / "x.ckpt")
    open(path, "wb").write(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    ckpt = Checkpoint.from_model(micro_model(20))
    good = str(tmp_path / "g.ckpt")
    save_checkpoint(ckpt, good)
    blob = open(good, "rb").read()
    open(good, "wb").write(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(good)


def test_checkpoint_cross_config_no_partial_load(tmp_path):
    ckpt = Checkpoint.from_model(micro_model(21))
    other = micro_model(22, cfa=CfaConfig(layers=1, heads=2, d_t=16,
                                          mlp_ratio=2, threshold=0.06))
    before = {n: p.data.copy() for n, p in other.parameters()}
    with pytest.raises(CheckpointError, match="shape mismatch"):
        ckpt.restore(other)
    for n, p in other.parameters():
        np.testing.assert_array_equal(p.data, before[n])
