import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenecoattn import frontend as F
from scenecoattn.frontend import BOS, EOS, SUGGEST, UNK, Scene, SceneObject, Vocabulary


def scene(objs=((0, (0.1, 0.1, 0.2, 0.2)), (2, (0.5, 0.4, 0.1, 0.3))), sid="s1"):
    return Scene(sid, [SceneObject(c, b) for c, b in objs], "pick up the cup", "the cup", False)


def test_reserved_ids():
    v = Vocabulary()
    assert [v.id(t) for t in F.RESERVED] == [0, 1, 2, 3, 4]
    assert (F.PAD, BOS, EOS, UNK, SUGGEST) == (0, 1, 2, 3, 4)


def test_tokenize_empty():
    assert F.tokenize("", Vocabulary()) == [BOS, EOS]


def test_tokenize_words():
    v = Vocabulary.build(["pick up the cup"])
    ids = F.tokenize("Pick up the cup", v)
    assert ids == [BOS, v.id("pick"), v.id("up"), v.id("the"), v.id("cup"), EOS]
    assert UNK not in ids


def test_tokenize_oov():
    assert F.tokenize("zzzunknown", Vocabulary()) == [BOS, UNK, EOS]


def test_tokenize_marker_and_punctuation():
    v = Vocabulary.build(["slice the bread"])
    assert F.tokenize("Slice, the bread! suggest: slice", v) == \
        [BOS, v.id("slice"), v.id("the"), v.id("bread"), SUGGEST, v.id("slice"), EOS]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["cup", "kettle", "the", "a", "suggest:", "slice", "bread"]), max_size=12))
def test_tokenize_detokenize_round_trip(words):
    text = " ".join(words)
    v = Vocabulary.build([text])
    assert F.detokenize(F.tokenize(text, v), v) == text


def test_vocab_file_round_trip(tmp_path):
    v = Vocabulary.build(["a b c"])
    v.save(tmp_path / "v.json")
    assert json.loads((tmp_path / "v.json").read_text())[:5] == F.RESERVED
    assert Vocabulary.load(tmp_path / "v.json").tokens == v.tokens


def test_pe_zero_position():
    pe = F.sinusoidal_pe(0, 8)
    assert pe.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    assert float(pe @ pe) == 4.0


def test_pe_known_value():
    assert F.sinusoidal_pe(1, 4)[0] == pytest.approx(math.sin(1.0))
    assert F.sinusoidal_pe(1, 4)[0] == pytest.approx(0.84147, abs=1e-5)
    assert F.sinusoidal_pe(1, 4)[3] == pytest.approx(math.cos(1 / 10000 ** (2 / 4)))


def test_pe_odd_width_rejected():
    with pytest.raises(ValueError):
        F.sinusoidal_pe(0, 5)


def test_pos2d_zero_center():
    pe = F.pos2d_embedding((0.0, 0.0, 1e-9, 1e-9), 8)
    assert np.allclose(pe[0::2], 0.0, atol=1e-8) and np.allclose(pe[1::2], 1.0)


def test_pos2d_formula():
    pe = F.pos2d_embedding((0.4, 0.1, 0.2, 0.2), 8)   # center (0.5, 0.2)
    for half, c in ((pe[:4], 0.5), (pe[4:], 0.2)):
        for i in range(2):
            assert half[2 * i] == pytest.approx(math.sin(c / 10000 ** (2 * i / 4)))
            assert half[2 * i + 1] == pytest.approx(math.cos(c / 10000 ** (2 * i / 4)))


def test_pos2d_identical_boxes():
    b = (0.2, 0.3, 0.1, 0.1)
    assert np.array_equal(F.pos2d_embedding(b, 16), F.pos2d_embedding(b, 16))


@pytest.mark.parametrize("bbox", [(1.2, 0, 0.1, 0.1), (0.1, 0.1, 0.0, 0.2), (-0.1, 0, 0.1, 0.1)])
def test_pos2d_bad_bbox(bbox):
    with pytest.raises(ValueError):
        F.pos2d_embedding(bbox, 8)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.integers(0, 500))
def test_codes_bounded(x, y, w, h, pos):
    assert np.all(np.abs(F.pos2d_embedding((x, y, w, h), 16)) <= 1.0)
    assert np.all(np.abs(F.sinusoidal_pe(pos, 16)) <= 1.0)


def test_featurize_no_noise_is_prototype():
    table = np.random.default_rng(0).normal(size=(3, 8))
    feats = F.featurize(scene(), table, sigma=0.0)
    assert np.array_equal(feats[0].feature, table[0])
    assert np.array_equal(feats[1].feature, table[2])


def test_featurize_deterministic_and_size_normalized():
    table = np.random.default_rng(0).normal(size=(3, 8))
    big = scene(((0, (0.0, 0.0, 0.9, 0.9)), (1, (0.5, 0.5, 0.01, 0.01))))
    a, b = F.featurize(big, table, noise_seed=4), F.featurize(big, table, noise_seed=4)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.feature, rb.feature)
        assert ra.feature.shape == rb.pos2d.shape == (8,)


def test_featurize_unknown_class():
    with pytest.raises(IndexError):
        F.featurize(scene(((5, (0.1, 0.1, 0.1, 0.1)),)), np.zeros((3, 8)))


def test_featurize_jitter_within_four_sigma():
    table = np.zeros((1, 16))
    sigma = 0.05
    dev = np.concatenate([
        F.featurize(scene(((0, (0.1, 0.1, 0.1, 0.1)),), sid=f"s{i}"), table, sigma, noise_seed=i)[0].feature
        for i in range(625)])                     # 10^4 coordinates
    assert np.all(np.abs(dev) <= 4.5 * sigma)
    assert np.mean(np.abs(dev) <= 4 * sigma) > 0.999
    assert abs(dev.std() - sigma) < 0.05 * sigma


def test_scene_json_round_trip(tmp_path):
    s = scene()
    path = tmp_path / "s.jsonl"
    path.write_text(F.dump_scenes([s, scene(sid="s2")]))
    back = F.load_scenes(path, n_classes=3)
    assert back[0].to_dict() == s.to_dict()


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.pop("instruction"), "$.instruction"),
    (lambda d: d["objects"][1].update(bbox=[0.1, 0.1, 2.0, 0.1]), "$.objects[1].bbox"),
    (lambda d: d["objects"][0].update(class_id="cup"), "$.objects[0].class_id"),
    (lambda d: d.update(target=""), "$.target"),
])
def test_scene_errors_name_field(mutate, path):
    d = scene().to_dict()
    mutate(d)
    with pytest.raises(F.SceneFormatError) as exc:
        Scene.from_dict(d, n_classes=3)
    assert path in str(exc.value)
