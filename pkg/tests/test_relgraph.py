import json
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenecoattn import relgraph as rg
from scenecoattn.tensor import Tape, Tensor

from conftest import max_rel_err, numeric_grad

FRAMES = [{0, 1}, {0}, {1, 2}]


def recount(frames, n):
    """Brute-force co-occurrence weights as exact fractions, independent of OccurrenceCounts."""
    frames = [set(f) for f in frames]
    single = [sum(1 for f in frames if c in f) for c in range(n)]
    w = [[Fraction(0)] * n for _ in range(n)]
    for a in range(n):
        for b in range(n):
            if a != b and single[a] and single[b]:
                both = sum(1 for f in frames if a in f and b in f)
                w[a][b] = Fraction(both, single[a] * single[b])
    return single, w


def test_empty_frame_only_bumps_frames_seen():
    c = rg.OccurrenceCounts(3).observe_frame([])
    assert c.frames_seen == 1
    assert not c.single.any() and not c.pair.any()


def test_three_frame_counts():
    c = rg.OccurrenceCounts(3).observe_frames(FRAMES)
    assert c.single.tolist() == [2, 2, 1]
    assert (c.pair[0, 1], c.pair[1, 2], c.pair[0, 2]) == (1, 1, 0)
    assert c.frames_seen == 3


def test_instance_multiplicity_ignored():
    a = rg.OccurrenceCounts(3).observe_frame([0, 0, 1])
    b = rg.OccurrenceCounts(3).observe_frame([0, 1])
    assert np.array_equal(a.pair, b.pair) and np.array_equal(a.single, b.single)


def test_unknown_class_rejected():
    with pytest.raises(IndexError):
        rg.OccurrenceCounts(3).observe_frame([3])


def test_weights_hand_values():
    c = rg.OccurrenceCounts(3).observe_frames(FRAMES)
    assert rg.weight(c, 0, 1) == 0.25
    assert rg.weight(c, 1, 2) == 0.5
    assert rg.weight(c, 0, 2) == 0.0
    assert rg.weight(c, 1, 1) == 0.0


def test_unseen_class_weight_is_zero():
    c = rg.OccurrenceCounts(4).observe_frames(FRAMES)
    assert rg.weight(c, 0, 3) == 0.0


def test_build_matrix_hand_values():
    m = rg.build_matrix(rg.OccurrenceCounts(3).observe_frames(FRAMES))
    assert m[0, 1] == m[1, 0] == 0.25
    assert m[1, 2] == m[2, 1] == 0.5
    assert m[0, 2] == 0.0
    assert np.array_equal(np.diag(m), np.zeros(3))


def test_build_matrix_zero_frames():
    assert not rg.build_matrix(rg.OccurrenceCounts(5)).any()


@pytest.mark.parametrize("frames", [1, 4, 7])
def test_all_classes_every_frame(frames):
    n = 4
    m = rg.build_matrix(rg.OccurrenceCounts(n).observe_frames([range(n)] * frames))
    off = ~np.eye(n, dtype=bool)
    assert np.allclose(m[off], 1.0 / frames)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.lists(st.integers(0, n - 1), max_size=6), max_size=30))))
def test_incremental_equals_recount(case):
    n, frames = case
    counts = rg.OccurrenceCounts(n).observe_frames(frames)
    m = rg.build_matrix(counts)
    single, w = recount(frames, n)
    assert counts.single.tolist() == single
    for a in range(n):
        for b in range(n):
            assert m[a, b] == float(w[a][b])
            assert rg.weight(counts, a, b) == float(w[a][b])
    assert np.array_equal(m, m.T)
    for a, b in combinations(range(n), 2):
        if single[a] and single[b]:
            assert m[a, b] <= 1.0 / max(single[a], single[b])


def test_snapshot_round_trip(tmp_path):
    c = rg.OccurrenceCounts(3, class_names=["a", "b", "c"]).observe_frames(FRAMES)
    c.save(tmp_path / "g.json")
    back = rg.OccurrenceCounts.load(tmp_path / "g.json")
    assert back.to_json() == c.to_json()
    obj = json.loads((tmp_path / "g.json").read_text())
    assert set(obj) == {"n_classes", "frames_seen", "single", "pair", "class_names"}


def test_snapshot_asymmetric_rejected():
    obj = rg.OccurrenceCounts(3).observe_frames(FRAMES).to_json()
    obj["pair"][0][1] += 1
    with pytest.raises(rg.GraphFormatError, match="symmetric"):
        rg.OccurrenceCounts.from_json(obj)


def test_restrict_to_scene():
    m = rg.build_matrix(rg.OccurrenceCounts(3).observe_frames(FRAMES))
    r = rg.restrict_to_scene(m, [1, 2])
    assert r[1, 2] == 0.5 and r[0, 1] == 0.0


def test_encode_zero_matrix_zero_bias():
    w = Tensor(np.random.default_rng(0).normal(size=(9, 4)))
    out = rg.encode_relations(np.zeros((3, 3)), w, Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros(4))


def test_encode_selector_projection():
    m = np.arange(9, dtype=float).reshape(3, 3)
    w = np.zeros((9, 2))
    w[1, 0] = 1.0          # row-major entry (0, 1)
    w[5, 1] = 1.0          # entry (1, 2)
    out = rg.encode_relations(m, Tensor(w), Tensor(np.zeros(2)))
    assert out.data.tolist() == [m[0, 1], m[1, 2]]


def test_encode_matches_dense_oracle():
    rng = np.random.default_rng(5)
    m, w, b = rng.random((4, 4)), rng.normal(size=(16, 6)), rng.normal(size=6)
    expected = np.array([sum(m.reshape(-1)[i] * w[i, j] for i in range(16)) + b[j] for j in range(6)])
    assert np.allclose(rg.encode_relations(m, Tensor(w), Tensor(b)).data, expected, atol=1e-6)
    batched = rg.encode_relations(np.stack([m, m]), Tensor(w), Tensor(b)).data
    assert np.allclose(batched, np.stack([expected, expected]), atol=1e-6)


def test_encode_shape_mismatch():
    from scenecoattn.tensor import ShapeError
    with pytest.raises(ShapeError):
        rg.encode_relations(np.zeros((3, 3)), Tensor(np.zeros((8, 2))), Tensor(np.zeros(2)))


def test_encode_gradients():
    rng = np.random.default_rng(9)
    m, w, b = rng.random((3, 3)), rng.normal(size=(9, 5)), rng.normal(size=5)
    proj = rng.normal(size=5)
    tape = Tape()
    tw, tb = tape.watch(w), tape.watch(b)
    tape.backward((rg.encode_relations(m, tw, tb) * proj).sum())
    f = lambda: float((rg.encode_relations(m, Tensor(w), Tensor(b)).data * proj).sum())
    assert max_rel_err(tw.grad, numeric_grad(f, w)) < 1e-5
    assert max_rel_err(tb.grad, numeric_grad(f, b)) < 1e-5
