import math

import numpy as np
import pytest

from scenecoattn import model as M
from scenecoattn import trainer as T
from scenecoattn.frontend import tokenize
from scenecoattn.tensor import as_constants


def batch_loss(params, scenes, corpus, graph, cfg):
    return T.loss_on_batch(as_constants(params), scenes, corpus.vocab, graph, cfg).item()


def test_initial_loss_near_uniform(small_corpus, small_graph):
    cfg = M.ModelConfig(vocab_size=len(small_corpus.vocab), dropout=0.0)
    params = M.init_params(cfg, 0)
    loss = batch_loss(params, small_corpus.train[:16], small_corpus, small_graph, cfg)
    assert abs(loss - math.log(cfg.vocab_size)) < 0.5


def test_duplicate_scene_mean_semantics(small_corpus, small_graph, tiny_cfg):
    params = M.init_params(tiny_cfg, 0, "float64")
    s = small_corpus.train[0]
    one = batch_loss(params, [s], small_corpus, small_graph, tiny_cfg)
    two = batch_loss(params, [s, s], small_corpus, small_graph, tiny_cfg)
    assert abs(one - two) < 1e-12


def test_batch_order_invariance(small_corpus, small_graph, tiny_cfg):
    params = M.init_params(tiny_cfg, 0, "float64")
    scenes = small_corpus.train[:6]
    a = batch_loss(params, scenes, small_corpus, small_graph, tiny_cfg)
    b = batch_loss(params, scenes[::-1], small_corpus, small_graph, tiny_cfg)
    assert abs(a - b) < 1e-6


def test_adam_first_step_is_sign_of_gradient():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    grads = {"w": rng.normal(size=(4, 3)) * 1e-2, "b": rng.normal(size=3) * 1e-2}
    cfg = T.TrainConfig(lr=1e-3, clip_norm=10.0)
    before = {k: v.copy() for k, v in params.items()}
    T.adam_step(T.TrainState.fresh(params), grads, cfg)
    for k in params:
        delta = params[k] - before[k]
        assert np.allclose(delta, -cfg.lr * np.sign(grads[k]), rtol=1e-3)
        assert np.all(np.abs(delta) <= cfg.lr * (1 + 1e-6))


def test_adam_zero_gradient_is_noop():
    params = {"w": np.ones((2, 2))}
    state = T.TrainState.fresh(params)
    T.adam_step(state, {"w": np.zeros((2, 2))}, T.TrainConfig())
    assert np.array_equal(params["w"], np.ones((2, 2)))
    assert state.step == 1


def test_clip_invariance():
    rng = np.random.default_rng(1)
    g = {"a": rng.normal(size=5), "b": rng.normal(size=(2, 2))}
    at_threshold = {k: v / T.global_norm(g) for k, v in g.items()}       # norm exactly 1
    scaled = {k: 10 * v for k, v in at_threshold.items()}
    outs = []
    for grads in (at_threshold, scaled):
        params = {"a": np.zeros(5), "b": np.zeros((2, 2))}
        T.adam_step(T.TrainState.fresh(params), grads, T.TrainConfig(clip_norm=1.0))
        outs.append(params)
    for k in outs[0]:
        assert np.allclose(outs[0][k], outs[1][k], rtol=1e-12, atol=1e-15)


def test_clip_reports_non_finite_tensor():
    with pytest.raises(T.NonFiniteGradient, match="bad"):
        T.clip_gradients({"ok": np.ones(2), "bad": np.array([np.nan, 1.0])}, 1.0)


def test_frozen_tensor_untouched():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    T.adam_step(T.TrainState.fresh(params), {"a": np.ones(2), "b": np.ones(2)}, T.TrainConfig(), frozen=("b",))
    assert params["a"].any() and not params["b"].any()


@pytest.mark.parametrize("bad", [dict(lr=0), dict(beta1=1.0), dict(clip_norm=0), dict(precision="float16")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        T.TrainConfig(**bad)


def short_run(corpus, graph, cfg, seed, tmp=None):
    return T.train(corpus.train, corpus.vocab, graph, cfg, T.TrainConfig(max_steps=6, batch_size=4, seed=seed),
                   val_scenes=corpus.val, out_dir=tmp)


def test_same_seed_same_trace_and_checkpoint(tmp_path, small_corpus, small_graph, tiny_cfg):
    cfg = M.ModelConfig(**{**tiny_cfg.to_dict(), "dropout": 0.1})
    short_run(small_corpus, small_graph, cfg, 4, tmp_path / "a")
    short_run(small_corpus, small_graph, cfg, 4, tmp_path / "b")
    for name in ("trace.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_different_trace(small_corpus, small_graph, tiny_cfg):
    a = short_run(small_corpus, small_graph, tiny_cfg, 1)
    b = short_run(small_corpus, small_graph, tiny_cfg, 2)
    assert [t[1] for t in a.trace] != [t[1] for t in b.trace]


def test_trace_and_intermediate_checkpoints(tmp_path, small_corpus, small_graph, tiny_cfg):
    T.train(small_corpus.train, small_corpus.vocab, small_graph, tiny_cfg,
            T.TrainConfig(max_steps=4, batch_size=4, eval_every=2), val_scenes=small_corpus.val, out_dir=tmp_path)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss,val_loss" and len(lines) == 5
    assert lines[2].split(",")[2] and not lines[1].split(",")[2]
    assert (tmp_path / "checkpoint_step2.bin").exists() and (tmp_path / "checkpoint.bin").exists()


def test_bad_target_fails_before_training(small_corpus, small_graph, tiny_cfg):
    cfg = M.ModelConfig(**{**tiny_cfg.to_dict(), "max_len": 4})
    with pytest.raises(ValueError, match="max_len"):
        T.train(small_corpus.train, small_corpus.vocab, small_graph, cfg, T.TrainConfig(max_steps=1))


def test_overfit_loss_and_memorization(overfit_run, small_corpus, small_graph):
    result, cfg, _ = overfit_run
    assert result.final_loss < 0.05
    outs = M.predict(result.params, small_corpus.train, small_corpus.vocab, small_graph, cfg)
    exact = np.mean([o == tokenize(s.target, small_corpus.vocab) for o, s in zip(outs, small_corpus.train)])
    assert exact >= 0.9


def test_overfit_window_means_decrease(overfit_run):
    result, _, _ = overfit_run
    losses = np.array([t[1] for t in result.trace])
    windows = losses.reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0)
