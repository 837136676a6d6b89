"""Two-stream co-attention encoder and autoregressive decoder.

Visual stream: one relation token followed by one token per detected region.
Text stream: instruction tokens with sinusoidal positions. Each co-attention
layer lets each stream query the other one, with both updates computed from
the same layer inputs. The decoder cross-attends over the concatenation of
both stream outputs.

All forward functions take ``P``, a dict of :class:`Tensor` (tracked on a tape
for training, or plain constants for inference), and work on padded batches.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import frontend
from .frontend import BOS, EOS, PAD, Scene, Vocabulary
from .relgraph import encode_relations, restrict_to_scene
from .tensor import (PRECISIONS, ShapeError, Tensor, add, as_constants, concat, cross_entropy,
                     dropout, embedding, gelu, layer_norm, linear, log_softmax, matmul, softmax)


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int = 12
    d_model: int = 64
    n_heads: int = 4
    n_coattn_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    d_v: int = 512
    d_r: int = 64
    max_len: int = 32
    dropout: float = 0.1
    ablate_graph: bool = False
    self_attention: bool = False
    feature_sigma: float = 0.05
    noise_seed: int = 0
    train_prototypes: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "n_classes", "d_model", "n_heads", "n_coattn_layers",
                     "n_decoder_layers", "d_ff", "d_v", "d_r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.d_v % 4:
            raise ValueError("d_v must be divisible by 4 for 2D positions")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


# ------------------------------------------------------------------ parameters

def _attn_shapes(prefix: str, D: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.{p}.w"] = (D, D)
        out[f"{prefix}.{p}.b"] = (D,)
    return out


def _ln_shapes(prefix: str, D: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (D,), f"{prefix}.b": (D,)}


def _ff_shapes(prefix: str, D: int, F: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.1.w": (D, F), f"{prefix}.1.b": (F,), f"{prefix}.2.w": (F, D), f"{prefix}.2.b": (D,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ff
    s: dict[str, tuple[int, ...]] = {
        "frontend.prototypes": (cfg.n_classes, cfg.d_v),
        "visual.feat_proj.w": (cfg.d_v, D),
        "visual.feat_proj.b": (D,),
        "visual.pos_proj.w": (cfg.d_v, D),
    }
    if cfg.ablate_graph:
        s["relation.null_token"] = (D,)
    else:
        s["relation.encoder.w"] = (cfg.n_classes ** 2, cfg.d_r)
        s["relation.encoder.b"] = (cfg.d_r,)
        s["relation.proj.w"] = (cfg.d_r, D)
        s["relation.proj.b"] = (D,)
    s["text.embed"] = (cfg.vocab_size, D)
    for layer in range(cfg.n_coattn_layers):
        for stream in ("vis", "txt"):
            pre = f"coattn.{layer}.{stream}"
            if cfg.self_attention:
                s.update(_attn_shapes(f"{pre}.self", D))
                s.update(_ln_shapes(f"{pre}.ln0", D))
            s.update(_attn_shapes(f"{pre}.cross", D))
            s.update(_ln_shapes(f"{pre}.ln1", D))
            s.update(_ff_shapes(f"{pre}.ff", D, F))
            s.update(_ln_shapes(f"{pre}.ln2", D))
    for layer in range(cfg.n_decoder_layers):
        pre = f"decoder.{layer}"
        s.update(_attn_shapes(f"{pre}.self", D))
        s.update(_ln_shapes(f"{pre}.ln1", D))
        s.update(_attn_shapes(f"{pre}.cross", D))
        s.update(_ln_shapes(f"{pre}.ln2", D))
        s.update(_ff_shapes(f"{pre}.ff", D, F))
        s.update(_ln_shapes(f"{pre}.ln3", D))
    s["output.w"] = (D, cfg.vocab_size)
    s["output.b"] = (cfg.vocab_size,)
    return s


def init_params(cfg: ModelConfig, seed: int = 0, precision: str = "float32") -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dtype = PRECISIONS[precision]
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name == "output.w":
            arr = rng.normal(0.0, 0.02, shape)
        elif name in ("frontend.prototypes", "relation.null_token"):
            arr = rng.normal(0.0, 1.0, shape)
        elif name == "text.embed":
            arr = rng.normal(0.0, cfg.d_model ** -0.5, shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, shape[0] ** -0.5, shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def cast_params(params: dict[str, np.ndarray], precision: str) -> dict[str, np.ndarray]:
    dtype = PRECISIONS[precision]
    return {k: v.astype(dtype) for k, v in params.items()}


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    scene_ids: list[str]
    class_ids: np.ndarray      # [B, R] int
    region_mask: np.ndarray    # [B, R] bool
    jitter: np.ndarray         # [B, R, d_v]
    pos2d: np.ndarray          # [B, R, d_v]
    relation: np.ndarray       # [B, n, n] scene-restricted, normalized weights
    text_ids: np.ndarray       # [B, Tt]
    text_mask: np.ndarray
    target_ids: np.ndarray     # [B, Ty]  BOS ... EOS, PAD-padded
    target_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.scene_ids)


def relation_input(m: np.ndarray | None, n_classes: int) -> np.ndarray:
    """Scale the historical matrix so its largest weight is 1."""
    if m is None:
        return np.zeros((n_classes, n_classes))
    if m.shape != (n_classes, n_classes):
        raise ShapeError(f"relation matrix {m.shape} does not match n_classes={n_classes}")
    top = float(m.max()) if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def _pad(seqs: Sequence[Sequence[int]], fill: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(s) for s in seqs), default=1))
    ids = np.full((len(seqs), width), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def make_batch(scenes: Sequence[Scene], vocab: Vocabulary, relation_matrix: np.ndarray | None,
               cfg: ModelConfig, dtype=np.float32, with_targets: bool = True) -> Batch:
    if not scenes:
        raise ValueError("empty batch")
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} tokens but the model expects {cfg.vocab_size}")
    B = len(scenes)
    R = max(1, max(len(s.objects) for s in scenes))
    class_ids = np.zeros((B, R), dtype=np.int64)
    region_mask = np.zeros((B, R), dtype=bool)
    jitter = np.zeros((B, R, cfg.d_v), dtype=dtype)
    pos2d = np.zeros((B, R, cfg.d_v), dtype=dtype)
    relation = np.zeros((B, cfg.n_classes, cfg.n_classes), dtype=dtype)
    base = None if cfg.ablate_graph else relation_input(relation_matrix, cfg.n_classes)
    texts, targets = [], []
    for i, scene in enumerate(scenes):
        k = len(scene.objects)
        for j, o in enumerate(scene.objects):
            if not 0 <= o.class_id < cfg.n_classes:
                raise IndexError(f"scene {scene.scene_id}: class id {o.class_id} outside [0, {cfg.n_classes})")
            class_ids[i, j] = o.class_id
            pos2d[i, j] = frontend.pos2d_embedding(o.bbox, cfg.d_v)
        region_mask[i, :k] = True
        jitter[i, :k] = frontend.region_jitter(scene, cfg.d_v, cfg.feature_sigma, cfg.noise_seed)
        if base is not None:
            relation[i] = restrict_to_scene(base, scene.class_ids)
        texts.append(frontend.tokenize(scene.instruction, vocab))
        if with_targets:
            tgt = frontend.tokenize(scene.target, vocab)
            if len(tgt) > cfg.max_len:
                raise ValueError(f"scene {scene.scene_id}: target has {len(tgt)} tokens, max_len is {cfg.max_len}")
            targets.append(tgt)
    text_ids, text_mask = _pad(texts)
    if with_targets:
        target_ids, target_mask = _pad(targets)
    else:
        target_ids = np.full((B, 1), BOS, dtype=np.int64)
        target_mask = np.ones((B, 1), dtype=bool)
    return Batch([s.scene_id for s in scenes], class_ids, region_mask, jitter, pos2d, relation,
                 text_ids, text_mask, target_ids, target_mask)


# ------------------------------------------------------------------ layers

@lru_cache(maxsize=64)
def _pe_table(length: int, d_model: int) -> np.ndarray:
    table = frontend.sinusoidal_table(length, d_model)
    table.setflags(write=False)
    return table


def _dtype(P: dict[str, Tensor]):
    return P["output.w"].dtype


def multi_head_attention(P: dict[str, Tensor], prefix: str, q_in: Tensor, kv_in: Tensor,
                         n_heads: int, mask: np.ndarray | None = None,
                         rng: np.random.Generator | None = None, drop: float = 0.0,
                         probe: list | None = None) -> Tensor:
    """Scaled dot-product attention with ``n_heads`` heads.

    Accepts ``[T, D]`` or ``[B, T, D]`` inputs. ``mask`` is boolean (True =
    may attend), shaped ``[Tq, Tk]`` / ``[B, Tq, Tk]`` or anything that
    broadcasts to ``[B, 1, Tq, Tk]``. A query with no visible key yields a
    zero vector.
    """
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in = q_in.reshape((1,) + q_in.shape)
        kv_in = kv_in.reshape((1,) + kv_in.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    B, Tq, D = q_in.shape
    if kv_in.ndim != 3 or kv_in.shape[0] != B or kv_in.shape[2] != D:
        raise ShapeError(f"attention inputs {q_in.shape} and {kv_in.shape} are incompatible")
    Tk = kv_in.shape[1]
    H = n_heads
    dk = D // H
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            if mask.shape[1:] != (Tq, Tk) and mask.shape[1:] != (1, Tk):
                raise ShapeError(f"mask shape {mask.shape} does not match ({Tq}, {Tk})")
            mask = mask[:, None]
        try:
            np.broadcast_shapes(mask.shape, (B, 1, Tq, Tk))
        except ValueError:
            raise ShapeError(f"mask shape {mask.shape} does not match ({B}, 1, {Tq}, {Tk})") from None

    q = linear(q_in, P[f"{prefix}.q.w"], P[f"{prefix}.q.b"]).reshape(B, Tq, H, dk).transpose(0, 2, 1, 3)
    k = linear(kv_in, P[f"{prefix}.k.w"], P[f"{prefix}.k.b"]).reshape(B, Tk, H, dk).transpose(0, 2, 3, 1)
    v = linear(kv_in, P[f"{prefix}.v.w"], P[f"{prefix}.v.b"]).reshape(B, Tk, H, dk).transpose(0, 2, 1, 3)
    scores = matmul(q, k) * (1.0 / np.sqrt(dk))
    att = softmax(scores, axis=-1, mask=mask)
    if probe is not None:
        probe.append((prefix, att.data, None if mask is None else np.broadcast_to(mask, att.shape)))
    att = dropout(att, drop, rng)
    pooled = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
    if mask is not None:
        visible = np.broadcast_to(mask, (B, 1, Tq, Tk)).any(axis=-1)[:, 0, :, None]
        if not visible.all():
            keep = np.broadcast_to(visible, (B, Tq, D)).astype(q_in.dtype)
            out = linear(pooled, P[f"{prefix}.o.w"], P[f"{prefix}.o.b"]) * keep
            return out.reshape(Tq, D) if unbatched else out
    out = linear(pooled, P[f"{prefix}.o.w"], P[f"{prefix}.o.b"])
    return out.reshape(Tq, D) if unbatched else out


def _ln(P, prefix, x, eps):
    return layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"], eps)


def _ff(P, prefix, x):
    h = gelu(linear(x, P[f"{prefix}.1.w"], P[f"{prefix}.1.b"]))
    return linear(h, P[f"{prefix}.2.w"], P[f"{prefix}.2.b"])


def _stream_block(P, pre, x, other, other_mask, self_mask, cfg, rng, probe):
    drop = cfg.dropout if rng is not None else 0.0
    if cfg.self_attention:
        a = multi_head_attention(P, f"{pre}.self", x, x, cfg.n_heads, self_mask, rng, drop, probe)
        x = _ln(P, f"{pre}.ln0", x + dropout(a, drop, rng), cfg.ln_eps)
    a = multi_head_attention(P, f"{pre}.cross", x, other, cfg.n_heads, other_mask, rng, drop, probe)
    x = _ln(P, f"{pre}.ln1", x + dropout(a, drop, rng), cfg.ln_eps)
    f = _ff(P, f"{pre}.ff", x)
    return _ln(P, f"{pre}.ln2", x + dropout(f, drop, rng), cfg.ln_eps)


def coattention_layer(P: dict[str, Tensor], layer: int, visual: Tensor, text: Tensor,
                      cfg: ModelConfig, visual_mask: np.ndarray | None = None,
                      text_mask: np.ndarray | None = None, rng=None, probe=None) -> tuple[Tensor, Tensor]:
    """One co-attention layer over ``[B, T, D]`` streams.

    Visual queries attend to text keys/values and vice versa; both directions
    read the layer's inputs, never each other's outputs.
    """
    if visual.shape[1] == 0 or text.shape[1] == 0:
        raise ValueError("co-attention needs at least one token in each stream")
    B = visual.shape[0]
    vm = np.ones((B, visual.shape[1]), bool) if visual_mask is None else visual_mask
    tm = np.ones((B, text.shape[1]), bool) if text_mask is None else text_mask
    v_self = vm[:, None, None, :] if cfg.self_attention else None
    t_self = tm[:, None, None, :] if cfg.self_attention else None
    v_new = _stream_block(P, f"coattn.{layer}.vis", visual, text, tm[:, None, None, :], v_self, cfg, rng, probe)
    t_new = _stream_block(P, f"coattn.{layer}.txt", text, visual, vm[:, None, None, :], t_self, cfg, rng, probe)
    return v_new, t_new


@dataclass
class FusedContext:
    states: Tensor          # [B, L, D]: visual outputs then text outputs
    mask: np.ndarray        # [B, L] bool
    boundary: int           # index of the first text position

    @property
    def visual(self) -> np.ndarray:
        return self.states.data[:, :self.boundary]

    @property
    def text(self) -> np.ndarray:
        return self.states.data[:, self.boundary:]


def encode(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig,
           rng: np.random.Generator | None = None, probe: list | None = None) -> FusedContext:
    dt = _dtype(P)
    B = len(batch)
    D = cfg.d_model
    drop = cfg.dropout if rng is not None else 0.0
    if batch.text_ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id {batch.text_ids.max()} >= vocab_size {cfg.vocab_size}")

    if cfg.ablate_graph:
        rel_tok = add(np.zeros((B, 1, D), dtype=dt), P["relation.null_token"])
    else:
        r_emb = encode_relations(batch.relation.astype(dt, copy=False),
                                 P["relation.encoder.w"], P["relation.encoder.b"])
        rel_tok = linear(r_emb, P["relation.proj.w"], P["relation.proj.b"]).reshape(B, 1, D)

    feats = embedding(P["frontend.prototypes"], batch.class_ids) + batch.jitter.astype(dt, copy=False)
    regions = (linear(feats, P["visual.feat_proj.w"], P["visual.feat_proj.b"])
               + matmul(Tensor(batch.pos2d.astype(dt, copy=False)), P["visual.pos_proj.w"]))
    visual = dropout(concat([rel_tok, regions], axis=1), drop, rng)
    visual_mask = np.concatenate([np.ones((B, 1), bool), batch.region_mask], axis=1)

    Tt = batch.text_ids.shape[1]
    text = embedding(P["text.embed"], batch.text_ids) * float(np.sqrt(D)) + _pe_table(Tt, D).astype(dt)
    text = dropout(text, drop, rng)

    for layer in range(cfg.n_coattn_layers):
        visual, text = coattention_layer(P, layer, visual, text, cfg, visual_mask, batch.text_mask, rng, probe)

    states = concat([visual, text], axis=1)
    return FusedContext(states, np.concatenate([visual_mask, batch.text_mask], axis=1), visual.shape[1])


def decode(P: dict[str, Tensor], ctx: FusedContext, prefix_ids: np.ndarray, cfg: ModelConfig,
           prefix_mask: np.ndarray | None = None, rng=None, probe=None) -> Tensor:
    """Logits ``[B, T, V]`` for every prefix position (causal)."""
    dt = _dtype(P)
    prefix_ids = np.asarray(prefix_ids)
    B, T = prefix_ids.shape
    if T > cfg.max_len:
        raise ValueError(f"prefix length {T} exceeds max_len {cfg.max_len}")
    if prefix_ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id {prefix_ids.max()} >= vocab_size {cfg.vocab_size}")
    D = cfg.d_model
    drop = cfg.dropout if rng is not None else 0.0
    pm = np.ones((B, T), bool) if prefix_mask is None else prefix_mask
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_mask = causal[None, None] & pm[:, None, None, :]
    cross_mask = ctx.mask[:, None, None, :]

    y = embedding(P["text.embed"], prefix_ids) * float(np.sqrt(D)) + _pe_table(T, D).astype(dt)
    y = dropout(y, drop, rng)
    for layer in range(cfg.n_decoder_layers):
        pre = f"decoder.{layer}"
        a = multi_head_attention(P, f"{pre}.self", y, y, cfg.n_heads, self_mask, rng, drop, probe)
        y = _ln(P, f"{pre}.ln1", y + dropout(a, drop, rng), cfg.ln_eps)
        a = multi_head_attention(P, f"{pre}.cross", y, ctx.states, cfg.n_heads, cross_mask, rng, drop, probe)
        y = _ln(P, f"{pre}.ln2", y + dropout(a, drop, rng), cfg.ln_eps)
        f = _ff(P, f"{pre}.ff", y)
        y = _ln(P, f"{pre}.ln3", y + dropout(f, drop, rng), cfg.ln_eps)
    return linear(y, P["output.w"], P["output.b"])


def loss(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig, rng=None) -> Tensor:
    """Mean next-token cross-entropy over every real target position in the batch."""
    ctx = encode(P, batch, cfg, rng)
    logits = decode(P, ctx, batch.target_ids[:, :-1], cfg, batch.target_mask[:, :-1], rng)
    return cross_entropy(logits, batch.target_ids[:, 1:], batch.target_mask[:, 1:])


# ------------------------------------------------------------------ inference

def decode_step(P: dict[str, Tensor], ctx: FusedContext, prefix: Sequence[int] | np.ndarray,
                cfg: ModelConfig) -> np.ndarray:
    """Next-token distribution given ``prefix`` (``[T]`` or ``[B, T]``)."""
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if ids.shape[1] < 1:
        raise ValueError("prefix must contain at least BOS")
    logits = decode(P, ctx, ids, cfg).data[:, -1].astype(np.float64)
    probs = np.exp(log_softmax(logits))
    return probs[0] if single else probs


def sequence_log_prob(P: dict[str, Tensor], ctx: FusedContext, target: Sequence[int],
                      cfg: ModelConfig) -> float:
    """Sum of next-token log-probabilities of a BOS...EOS target (teacher-forced)."""
    ids = np.asarray(target, dtype=np.int64)[None]
    if ids.shape[1] < 2 or ids[0, 0] != BOS:
        raise ValueError("target must start with BOS and contain at least one predicted token")
    logits = decode(P, ctx, ids[:, :-1], cfg)
    ce = cross_entropy(logits, ids[:, 1:])
    return -float(ce.item()) * (ids.shape[1] - 1)


def generate(P: dict[str, Tensor], ctx: FusedContext, cfg: ModelConfig,
             max_len: int | None = None) -> list[list[int]]:
    """Greedy decoding from BOS for every context in the batch.

    Stops a sequence at EOS (kept) or after ``max_len`` tokens including BOS.
    Ties go to the lowest token id.
    """
    max_len = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    B = ctx.states.shape[0]
    ys = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    while ys.shape[1] < max_len and not done.all():
        logits = decode(P, ctx, ys, cfg).data[:, -1]
        nxt = logits.argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        ys = np.concatenate([ys, nxt[:, None]], axis=1)
        done |= nxt == EOS
    out = []
    for row in ys:
        seq = row.tolist()
        if EOS in seq:
            seq = seq[:seq.index(EOS) + 1]
        out.append(seq)
    return out


def predict(params: dict[str, np.ndarray], scenes: Sequence[Scene], vocab: Vocabulary,
            relation_matrix: np.ndarray | None, cfg: ModelConfig, batch_size: int = 64) -> list[list[int]]:
    """Greedy outputs for a list of scenes, in order."""
    P = as_constants(params)
    dt = _dtype(P)
    out: list[list[int]] = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        batch = make_batch(chunk, vocab, relation_matrix, cfg, dtype=dt, with_targets=False)
        out.extend(generate(P, encode(P, batch, cfg), cfg))
    return out
