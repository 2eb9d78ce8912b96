import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adstitch.core import POSITIONS, AdAsset, AssetKind, Position, Query, ValidationError
from adstitch.stitcher import (
    CheckpointError,
    FeatureVector,
    JointExample,
    Mode,
    NoAdError,
    PositionModel,
    StitchRequest,
    Stitcher,
    TrainExample,
    count_options,
    feature_keys,
    featurize,
    fresh_models,
    load_models,
    logistic_loss,
    loss_gradient,
    lr_score,
    save_models,
    stitch,
    thompson_sample,
    train_joint,
    train_online,
    trial_count,
)

URL = "https://www.abc.com/"
DATA = Path(__file__).parent / "data"


def T(i, text=None):
    return AdAsset(f"t{i:02d}", URL, AssetKind.TITLE, text or f"title number {i}")


def D(i, text=None):
    return AdAsset(f"d{i:02d}", URL, AssetKind.DESCRIPTION, text or f"description text {i}")


# -- featurization ---------------------------------------------------------

def test_featurize_deterministic_and_count():
    a, q = T(0, "red running shoes"), Query("cheap shoes")
    assert featurize(a, q, Position.T1, 22) == featurize(a, q, Position.T1, 22)
    assert len(feature_keys(a.text, q)) == 17
    assert len(featurize(a, q, Position.T1, 32)) == 17


def test_featurize_positions_differ():
    rng = np.random.default_rng(0)
    words = ["red", "shoes", "sale", "blue", "run", "fast", "new", "cheap"]
    for _ in range(1000):
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 5))))
        q = Query(" ".join(rng.choice(words, size=int(rng.integers(0, 3)))))
        a = T(0, text)
        assert featurize(a, q, Position.T1, 22) != featurize(a, q, Position.T2, 22)


# pure-Python reference of the hashing scheme, independent of numpy integer handling
_MASK = (1 << 64) - 1


def _h64(s):
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")


def _mix(x):
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _reference_indices(text, query, position, bits):
    salt = _h64(f"pos:{position}")
    out = set()
    for key in feature_keys(text, Query(query)):
        if "|" in key:
            gram, q = key.split("|", 1)
            h = _mix(_h64(gram) ^ _mix((_h64(q) + 0x9E3779B97F4A7C15) & _MASK))
        else:
            h = _h64(key)
        out.add(_mix(h ^ salt) >> (64 - bits))
    return sorted(out)


def test_featurize_golden_file():
    rows = json.loads((DATA / "featurize_golden.json").read_text(encoding="utf-8"))
    assert len(rows) >= 40
    for row in rows:
        a = T(0, row["text"])
        fv = featurize(a, Query(row["query"]), row["position"], row["hash_bits"])
        assert fv.indices.tolist() == row["indices"], row
        assert len(feature_keys(row["text"], Query(row["query"]))) == row["n_keys"]
        assert row["indices"] == _reference_indices(row["text"], row["query"], row["position"], row["hash_bits"])


# -- scoring ---------------------------------------------------------------

def fv(*idx, bits=16):
    return FeatureVector(np.array(sorted(idx), dtype=np.int64), bits)


def test_lr_score_examples():
    m = PositionModel.fresh(Position.T1, 16)
    assert lr_score(m, fv(1, 2)) == 0.5
    m.bias = 20.0
    assert lr_score(m, fv(1)) > 0.999999
    m.bias = 0.0
    m.weights[3], m.weights[7] = 1.0, -0.5
    assert lr_score(m, fv(3, 7)) == pytest.approx(0.6224593, abs=1e-7)
    with pytest.raises(ValidationError):
        lr_score(m, fv(1 << 16))


def test_trial_count_examples():
    m = PositionModel.fresh(Position.T1, 16)
    x = fv(4, 9, 11)
    assert trial_count(m, x) == 0.0
    train_online(m, [TrainExample(x, 1)], 0.02)
    assert trial_count(m, x) == pytest.approx(0.5 * 4.0)
    prev = trial_count(m, x)
    for label in (0, 1, 1, 0):
        train_online(m, [TrainExample(x, label)])
        assert trial_count(m, x) >= prev
        prev = trial_count(m, x)


def test_thompson_sample():
    rng = np.random.default_rng(0)
    draws = np.array([thompson_sample(0.3, 0.0, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    tight = np.array([thompson_sample(0.7, 1e6, rng) for _ in range(1000)])
    assert np.all(np.abs(tight - 0.7) < 0.01)
    a = [thompson_sample(0.4, 10, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


# -- training --------------------------------------------------------------

def test_train_one_step_trace():
    m = PositionModel.fresh(Position.T1, 16)
    x = fv(2, 5)
    train_online(m, [TrainExample(x, 1)], 0.02)
    assert m.weights[2] == np.float32(0.01) and m.weights[5] == np.float32(0.01)
    assert m.grad_sum[2] == 0.5 and m.bias == pytest.approx(0.01)
    assert m.updates_seen == 1
    assert m.weights[3] == 0.0


def test_train_alternating_equilibrium():
    m = PositionModel.fresh(Position.T1, 16)
    x = fv(1, 2, 3)
    m.weights[[1, 2, 3]] = 1.0
    batch = [TrainExample(x, i % 2) for i in range(10_000)]
    train_online(m, batch)
    assert abs(lr_score(m, x) - 0.5) < 0.05


def test_train_rejects_bad_labels():
    m = PositionModel.fresh(Position.T1, 16)
    with pytest.raises(ValidationError):
        train_online(m, [TrainExample(fv(1), 2)])
    with pytest.raises(ValidationError):
        train_online(m, [])
    assert m.updates_seen == 0 and not m.weights.any()


def test_gradient_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(100):
        w = rng.normal(0, 0.5, 64)
        b = float(rng.normal())
        x = fv(*rng.choice(64, size=int(rng.integers(1, 10)), replace=False), bits=6)
        y = int(rng.integers(0, 2))
        g = loss_gradient(b, w, x, y)
        h = 1e-5
        num_b = (logistic_loss(b + h, w, x, y) - logistic_loss(b - h, w, x, y)) / (2 * h)
        assert abs(g - num_b) <= 1e-5 * max(1e-3, abs(num_b))
        i = int(x.indices[0])
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        num_w = (logistic_loss(b, wp, x, y) - logistic_loss(b, wm, x, y)) / (2 * h)
        assert abs(g - num_w) <= 1e-5 * max(1e-3, abs(num_w))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 63), min_size=1, max_size=6), st.integers(0, 1)),
                min_size=1, max_size=40))
def test_grad_sum_monotone(examples):
    m = PositionModel.fresh(Position.T1, 16)
    before = m.grad_sum.copy()
    train_online(m, [TrainExample(fv(*set(ix)), y) for ix, y in examples])
    assert np.all(m.grad_sum >= before) and np.all(np.isfinite(m.weights))


def test_train_joint_credits_each_slot():
    models = fresh_models(16)
    ex = JointExample({Position.T1: fv(1), Position.D1: fv(2)}, 1)
    train_joint(models, [ex], 0.02)
    # joint logit 0 -> p = 0.5, g = -0.5 on both filled slots only
    assert models[Position.T1].weights[1] == np.float32(0.01)
    assert models[Position.D1].weights[2] == np.float32(0.01)
    assert models[Position.T2].updates_seen == 0 and models[Position.T1].updates_seen == 1
    with pytest.raises(ValidationError):
        train_joint(models, [JointExample({Position.T1: fv(1)}, 3)])


def test_train_joint_learns_additive_truth():
    rng = np.random.default_rng(0)
    theta = {Position.T1: rng.normal(0, 1, 8), Position.D1: rng.normal(0, 1, 8)}
    models = fresh_models(16)
    batch = []
    for _ in range(40_000):
        i, j = rng.integers(0, 8, size=2)
        z = theta[Position.T1][i] + theta[Position.D1][j]
        batch.append(JointExample({Position.T1: fv(int(i)), Position.D1: fv(int(j))},
                                  int(rng.random() < 1 / (1 + np.exp(-z)))))
    train_joint(models, batch, 0.02)
    learned = models[Position.T1].weights[:8]
    assert np.corrcoef(learned, theta[Position.T1])[0, 1] > 0.95


# -- stitching -------------------------------------------------------------

def test_count_options():
    assert count_options(3, 2) == 9
    assert count_options(10, 10) == 46
    assert count_options(1, 1) == 2


def test_stitch_evaluation_counts():
    models = fresh_models(16)
    q = Query("shoes")
    ad = stitch(models, StitchRequest(q, [T(i) for i in range(3)], [D(i) for i in range(2)]))
    assert ad.evaluations == 9
    ad = stitch(models, StitchRequest(q, [T(0)], [D(0)]))
    assert ad.evaluations == 2 and ad.title2 is None and ad.title3 is None and ad.desc2 is None
    ad = stitch(models, StitchRequest(q, [T(i) for i in range(10)], [D(i) for i in range(10)]))
    assert ad.evaluations == 46


def test_stitch_ties_go_to_lowest_id():
    ad = stitch(fresh_models(16), StitchRequest(Query("x"), [T(3), T(1), T(2)], [D(1), D(0)]))
    assert ad.key() == ("t01", "t02", "t03", "d00", "d01")


def test_stitch_dominant_asset_used_once():
    models = fresh_models(16)
    titles = [T(i) for i in range(5)]
    q = Query("shoes")
    for pos in POSITIONS[:3]:
        idx = featurize(titles[3], q, pos, 16).indices
        models[pos].weights[idx] = 1.0
    ad = stitch(models, StitchRequest(q, titles, [D(0), D(1)]))
    assert ad.title1.id == "t03"
    assert "t03" not in (ad.title2.id, ad.title3.id)


def test_stitch_empty_pool():
    with pytest.raises(NoAdError):
        stitch(fresh_models(16), StitchRequest(Query("x"), [], [D(0)]))


def test_exploit_is_pure_and_explore_reproducible():
    rng = np.random.default_rng(1)
    models = fresh_models(16)
    for m in models.values():
        m.weights[:] = rng.normal(0, 0.3, m.weights.shape)
        m.grad_sum[:] = 2.0
    engine = Stitcher(models)
    req = StitchRequest(Query("red shoes"), [T(i) for i in range(10)], [D(i) for i in range(10)])
    assert engine.stitch(req) == Stitcher(models).stitch(req)
    ereq = StitchRequest(req.query, req.titles, req.descriptions, Mode.EXPLORE, rng_seed=9)
    assert engine.stitch(ereq) == engine.stitch(ereq)
    ad = engine.stitch(ereq)
    assert len({a.id for a in ad.assets()}) == 5


def test_explore_converges_to_exploit_with_large_counts():
    rng = np.random.default_rng(3)
    agree = total = 0
    for r in range(1000):
        models = fresh_models(16)
        titles, descs = [T(i) for i in range(3)], [D(i) for i in range(2)]
        q = Query("q")
        for pos in POSITIONS:
            pool = titles if pos.kind is AssetKind.TITLE else descs
            # well-separated per-asset scores (gaps >= 0.05 in probability)
            ps = rng.permutation(np.linspace(0.2, 0.8, len(pool)))
            for a, p in zip(pool, ps):
                idx = featurize(a, q, pos, 16).indices
                models[pos].weights[idx] = np.log(p / (1 - p)) / len(idx)
                models[pos].grad_sum[idx] = 1e6
        engine = Stitcher(models, trial_scale=1.0)
        req = StitchRequest(q, titles, descs)
        exploit = engine.stitch(req)
        explore = engine.stitch(StitchRequest(q, titles, descs, Mode.EXPLORE, rng_seed=r))
        agree += exploit == explore
        total += 1
    assert agree / total >= 0.99


# -- checkpoints -----------------------------------------------------------

def _trained_models():
    models = fresh_models(16)
    rng = np.random.default_rng(2)
    for pos, m in models.items():
        batch = [TrainExample(fv(*rng.choice(1 << 16, 5, replace=False)), int(rng.integers(0, 2)))
                 for _ in range(50)]
        train_online(m, batch)
    return models


def test_checkpoint_roundtrip(tmp_path):
    for models in (fresh_models(16), _trained_models()):
        path = tmp_path / "m.ckpt"
        save_models(models, path)
        loaded = load_models(path)
        assert all(loaded[p] == models[p] for p in POSITIONS)
        save_models(loaded, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_names_section(tmp_path):
    path = tmp_path / "m.ckpt"
    save_models(_trained_models(), path)
    data = path.read_bytes()
    cases = {8: "header", 20: "position", 200: "weights", len(data) - 2: "checksum"}
    for cut, section in cases.items():
        bad = tmp_path / f"cut{cut}.ckpt"
        bad.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match=section):
            load_models(bad)
    flipped = bytearray(data)
    flipped[300] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_models(tmp_path / "flip.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_models(tmp_path / "magic.ckpt")
