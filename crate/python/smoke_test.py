"""Smoke test for the gapforge Python extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/gapforge-*.whl
then run `python python/smoke_test.py` (or `pytest python/smoke_test.py`).
"""

import math
import random

import gapforge


def test_closed_forms():
    same = [[0.6, 0.0, 0.8]] * 4
    assert abs(gapforge.clip_loss(same, same)["value"] - math.log(4)) < 1e-9

    anchors = [[1.0, 0.0], [0.0, 1.0]]
    partner = [[0.0, 1.0], [-1.0, 0.0]]
    assert abs(gapforge.atp_loss([anchors, partner])["value"] - 2.0) < 1e-9

    antipodal = [[1.0, 0.0], [-1.0, 0.0]]
    assert abs(gapforge.cu_loss([antipodal, antipodal])["value"] + 8.0) < 1e-9


def test_metrics_and_gradients():
    rng = random.Random(0)
    a = [[rng.gauss(0, 1) for _ in range(6)] for _ in range(12)]
    b = [[x + 0.05 * rng.gauss(0, 1) for x in row] for row in a]
    unit = gapforge.normalize_rows(a)
    assert all(abs(sum(x * x for x in r) - 1.0) < 1e-9 for r in unit)
    assert gapforge.cos_true_pairs(a, b) > 0.95
    assert gapforge.gap(a, a) == 0.0
    recall = dict(gapforge.recall_at_k(a, b, [1, 12]))
    assert recall[12] == 1.0

    out = gapforge.combined_loss([a, b])
    assert set(out["parts"]) == {"contrastive", "atp", "cu"}
    assert len(out["grads"]) == 2 and len(out["grads"][0]) == 12

    report = gapforge.alignment_report(a, b, ks=[1, 5])
    assert report["n"] == 12 and set(report["recall"]) == {"1", "5"}


def test_train_run():
    data = gapforge.SyntheticDataset(n_pairs=200, seed=3, d_feat=[8, 6])
    assert len(data) == 200 and data.spec["d_feat"] == [8, 6]
    result = gapforge.train_run(data, objective="gap", seed=1, epochs=3,
                                batch_size=32, hidden=16, embed_dim=8, eval_every=1)
    history = result.history
    assert [r["epoch"] for r in history] == [0, 1, 2, 3]
    first, last = history[0]["report"], history[-1]["report"]
    assert last["gap"] < first["gap"]
    emb = result.encode(data, "test")
    assert len(emb) == 2 and len(emb[0]) == 40 and len(emb[0][0]) == 8


if __name__ == "__main__":
    test_closed_forms()
    test_metrics_and_gradients()
    test_train_run()
    print("python smoke test: ok")
