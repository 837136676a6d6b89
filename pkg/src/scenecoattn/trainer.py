"""Teacher-forced training with global-norm clipping and Adam."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .checkpoint import save_checkpoint
from .frontend import Scene, Vocabulary
from .tensor import PRECISIONS, Tape, Tensor, as_constants

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 2000
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    losses: list[float] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], seed: int = 0) -> "TrainState":
        return cls(params, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, rng=np.random.default_rng(seed))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        worst = max(grads, key=lambda k: np.inf if not np.isfinite(grads[k]).all() else float(np.abs(grads[k]).max()))
        raise NonFiniteGradient(f"non-finite gradient (worst tensor: {worst})")
    if norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


def adam_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig,
              frozen: Sequence[str] = ()) -> TrainState:
    """Clip by global norm, then one bias-corrected Adam update (in place)."""
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        if name in frozen:
            continue
        p = state.params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p -= (cfg.lr * update).astype(p.dtype, copy=False)
    state.step = t
    return state


def loss_on_batch(P: dict[str, Tensor], scenes: Sequence[Scene], vocab: Vocabulary,
                  relation_matrix: np.ndarray | None, cfg: M.ModelConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    batch = M.make_batch(scenes, vocab, relation_matrix, cfg, dtype=P["output.w"].dtype)
    return M.loss(P, batch, cfg, rng)


def evaluate_loss(params: dict[str, np.ndarray], scenes: Sequence[Scene], vocab: Vocabulary,
                  relation_matrix, cfg: M.ModelConfig, batch_size: int = 64) -> float:
    """Token-weighted mean cross-entropy in eval mode."""
    P = as_constants(params)
    total, count = 0.0, 0
    for start in range(0, len(scenes), batch_size):
        batch = M.make_batch(scenes[start:start + batch_size], vocab, relation_matrix, cfg,
                             dtype=P["output.w"].dtype)
        n = int(batch.target_mask[:, 1:].sum())
        total += M.loss(P, batch, cfg).item() * n
        count += n
    return total / count


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    trace: list[tuple[int, float, float | None]]
    state: TrainState

    @property
    def final_loss(self) -> float:
        return self.trace[-1][1]


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "val_loss"])
        for step, loss, val in trace:
            w.writerow([step, repr(loss), "" if val is None else repr(val)])


def train(train_scenes: Sequence[Scene], vocab: Vocabulary, relation_matrix: np.ndarray | None,
          model_cfg: M.ModelConfig, train_cfg: TrainConfig, val_scenes: Sequence[Scene] = (),
          out_dir=None, init_seed: int | None = None) -> TrainResult:
    """Single-threaded reference training loop; deterministic given the seeds.

    Each epoch visits the training scenes in a fresh seeded permutation.
    """
    if not train_scenes:
        raise ValueError("no training scenes")
    seed = train_cfg.seed if init_seed is None else init_seed
    params = M.init_params(model_cfg, seed, train_cfg.precision)
    state = TrainState.fresh(params, train_cfg.seed)
    frozen = () if model_cfg.train_prototypes else ("frontend.prototypes",)
    # validate every target up front so a bad scene fails before step 1
    M.make_batch(list(train_scenes), vocab, relation_matrix, model_cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    order: list[int] = []
    trace: list[tuple[int, float, float | None]] = []
    n = len(train_scenes)
    bs = min(train_cfg.batch_size, n)
    while state.step < train_cfg.max_steps:
        if len(order) < bs:
            order.extend(state.rng.permutation(n).tolist())
        idx, order = order[:bs], order[bs:]
        tape = Tape()
        P = tape.watch_all(state.params)
        loss = loss_on_batch(P, [train_scenes[i] for i in idx], vocab, relation_matrix, model_cfg, state.rng)
        tape.backward(loss)
        adam_step(state, {k: t.grad for k, t in P.items()}, train_cfg, frozen)
        value = loss.item()
        state.losses.append(value)
        val = None
        at_eval = train_cfg.eval_every and state.step % train_cfg.eval_every == 0
        if at_eval or state.step == train_cfg.max_steps:
            if val_scenes:
                val = evaluate_loss(state.params, list(val_scenes), vocab, relation_matrix, model_cfg)
            if out is not None:
                name = "checkpoint.bin" if state.step == train_cfg.max_steps else f"checkpoint_step{state.step}.bin"
                save_checkpoint(out / name, state.params, model_cfg, vocab, relation_matrix)
            log.info("step %d loss %.4f val %s", state.step, value, "-" if val is None else f"{val:.4f}")
        trace.append((state.step, value, val))
    if out is not None:
        write_trace(trace, out / "trace.csv")
        if train_cfg.max_steps == 0:
            save_checkpoint(out / "checkpoint.bin", state.params, model_cfg, vocab, relation_matrix)
    return TrainResult(state.params, trace, state)
