"""Next-scale autoregressive transformer over multi-scale token maps.

The sequence starts with a learned condition token, which doubles as the
coarsest scale's input slot; each later scale's input block is the
area-resampled accumulation of all coarser quantized scales (bilinearly
upsampled to the full grid first). Every position of one scale is predicted
jointly from that context, so generation costs one transformer pass per
scale instead of one per token.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .substrate import (
    Model,
    OptimizerState,
    Tensor,
    TransformerBlocks,
    adam_step,
    area_matrix,
    bilinear_matrix,
    concat,
    cross_entropy,
    embedding_lookup,
    init_normal,
    layer_norm,
    linear,
)
from .tokenizer import MultiScaleTokenMap

UNCONDITIONAL = -1


@dataclass(frozen=True)
class ArConfig:
    vocab_size: int = 1024
    code_dim: int = 16
    schedule: tuple[int, ...] = (1, 2, 4, 8, 16)
    width: int = 128
    depth: int = 2
    heads: int = 4
    condition_classes: int = 11
    temperature: float = 1.0
    top_k: int = 64
    top_p: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if list(self.schedule) != sorted(set(self.schedule)):
            raise InvalidConfigError("schedule must be strictly ascending")
        k = self.schedule[-1]
        for s in self.schedule:
            if k % s != 0:
                raise InvalidConfigError(f"schedule entry {s} does not divide final side {k}")
        if self.schedule[0] != 1:
            raise InvalidConfigError("schedule must start at 1 (the condition slot)")
        if self.width % self.heads != 0:
            raise InvalidConfigError("width must be divisible by heads")
        if self.condition_classes < 1:
            raise InvalidConfigError("need at least one condition class")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")

    @property
    def context_length(self) -> int:
        """Sequence positions: the condition token occupies the coarsest
        scale's single slot, so this equals sum(k^2)."""
        return sum(k * k for k in self.schedule)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# -----------------------------
# Sequence layout
# -----------------------------
@dataclass
class ScaleSequence:
    """Flattened token-map view: tokens in ascending-scale order, each grid
    row-major, plus per-position scale ids."""

    tokens: np.ndarray              # (sum k^2,) int64
    scale_ids: np.ndarray           # (sum k^2,) index into schedule
    schedule: tuple[int, ...]

    def __post_init__(self):
        total = sum(k * k for k in self.schedule)
        if self.tokens.shape != (total,) or self.scale_ids.shape != (total,):
            raise InvalidInputError("sequence length does not match schedule")
        if np.any(np.diff(self.scale_ids) < 0):
            raise InvalidInputError("scale ids must be non-decreasing")


def flatten_scales(t: MultiScaleTokenMap) -> ScaleSequence:
    tokens = np.concatenate([g.reshape(-1) for g in t.grids])
    ids = np.concatenate([np.full(k * k, i, dtype=np.int64)
                          for i, k in enumerate(t.schedule)])
    return ScaleSequence(tokens.astype(np.int64), ids, tuple(t.schedule))


def unflatten_scales(seq: ScaleSequence, codebook_size: int = 1024) -> MultiScaleTokenMap:
    grids = []
    pos = 0
    for k in seq.schedule:
        grids.append(seq.tokens[pos:pos + k * k].reshape(k, k).copy())
        pos += k * k
    return MultiScaleTokenMap(grids, seq.schedule, codebook_size)


def scale_slices(schedule: tuple[int, ...]) -> list[slice]:
    out, pos = [], 0
    for k in schedule:
        out.append(slice(pos, pos + k * k))
        pos += k * k
    return out


def block_causal_mask(schedule: tuple[int, ...]) -> np.ndarray:
    """Boolean allow-matrix over the flattened sequence: a query at scale s
    may attend to every position of scales <= s (its own scale's positions
    carry only coarser-scale inputs, so this leaks nothing)."""
    ids = np.concatenate([np.full(k * k, i) for i, k in enumerate(schedule)])
    return ids[:, None] >= ids[None, :]


# -----------------------------
# Model
# -----------------------------
class ArModel(Model):
    """Transformer that predicts each scale's tokens from coarser scales.

    The tokenizer's codebook is carried as a frozen parameter so sequences
    of indices can be turned into latent inputs without the tokenizer.
    """

    def __init__(self, cfg: ArConfig, codebook: np.ndarray, seed: int = 0):
        super().__init__()
        codebook = np.asarray(codebook, dtype=cfg.np_dtype)
        if codebook.shape != (cfg.vocab_size, cfg.code_dim):
            raise InvalidConfigError(
                f"codebook shape {codebook.shape} != {(cfg.vocab_size, cfg.code_dim)}")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        w = cfg.width
        total = cfg.context_length

        self.codebook = self.add_param("ar.codebook", codebook)
        self.codebook.trainable = False
        self.codebook.requires_grad = False

        # class table: one row per condition class plus the unconditional row
        self.class_emb = self.add_param(
            "ar.class_emb", init_normal(rng, (cfg.condition_classes + 1, w), 0.02, dt))
        self.word_w = self.add_param("ar.word_w", init_normal(rng, (cfg.code_dim, w), 0.02, dt))
        self.word_b = self.add_param("ar.word_b", np.zeros(w, dtype=dt))
        self.pos_emb = self.add_param("ar.pos", init_normal(rng, (total, w), 0.02, dt))
        self.scale_emb = self.add_param(
            "ar.scale_emb", init_normal(rng, (len(cfg.schedule), w), 0.02, dt))
        self.blocks = TransformerBlocks(self, "ar.block", cfg.depth, w, cfg.heads, rng, dt)
        self.out_ln_g = self.add_param("ar.out_ln_g", np.ones(w, dtype=dt))
        self.out_ln_b = self.add_param("ar.out_ln_b", np.zeros(w, dtype=dt))
        # zero-init head: fresh models emit uniform logits (loss == ln V)
        self.head_w = self.add_param("ar.head_w", np.zeros((w, cfg.vocab_size), dtype=dt))
        self.head_b = self.add_param("ar.head_b", np.zeros(cfg.vocab_size, dtype=dt))

        self.mask = block_causal_mask(cfg.schedule)
        self._slices = scale_slices(cfg.schedule)

    # ---- input construction ----
    def condition_row(self, condition: int) -> int:
        c = self.cfg.condition_classes
        if condition == UNCONDITIONAL:
            return c
        if not (0 <= condition < c):
            raise InvalidInputError(
                f"unknown condition class {condition}; valid ids are 0..{c - 1} "
                f"or {UNCONDITIONAL} for unconditional")
        return condition

    def _input_blocks(self, grids: list[np.ndarray], n_scales: int) -> list[np.ndarray]:
        """Input blocks for scales 1..n_scales: block s is the accumulated
        reconstruction of scales < s (codebook vectors bilinearly upsampled
        to the full grid) area-resampled down to scale s's grid."""
        cfg = self.cfg
        k_full = cfg.schedule[-1]
        dt = cfg.np_dtype
        acc = np.zeros((k_full, k_full, cfg.code_dim), dtype=dt)
        blocks = []
        for i in range(n_scales):
            k = cfg.schedule[i]
            codes = self.codebook.data[grids[i].reshape(-1)].reshape(k, k, cfg.code_dim)
            up = bilinear_matrix(k, k_full, dt)
            acc = acc + np.einsum("ia,jb,abd->ijd", up, up, codes, optimize=True)
            k_next = cfg.schedule[i + 1]
            down = area_matrix(k_full, k_next, dt)
            nxt = np.einsum("ia,jb,abd->ijd", down, down, acc, optimize=True)
            blocks.append(nxt.reshape(k_next * k_next, cfg.code_dim))
        return blocks

    def scale_inputs(self, token_map: MultiScaleTokenMap) -> np.ndarray:
        """Teacher-forcing inputs for every position after the condition
        slot: (sum_{s>=2} k_s^2, code_dim)."""
        cfg = self.cfg
        blocks = self._input_blocks(token_map.grids, len(cfg.schedule) - 1)
        return np.concatenate(blocks, axis=0) if blocks else \
            np.zeros((0, cfg.code_dim), dtype=cfg.np_dtype)

    def forward(self, seq_inputs: np.ndarray, condition: int) -> Tensor:
        """Logits (sum k^2, vocab) from teacher-forcing inputs.

        ``seq_inputs`` holds the latent input rows for every position after
        the condition slot, as produced by scale_inputs.
        """
        cfg = self.cfg
        total = cfg.context_length
        if seq_inputs.shape != (total - 1, cfg.code_dim):
            raise InvalidInputError(
                f"seq_inputs must be {(total - 1, cfg.code_dim)}, got {seq_inputs.shape}")
        row = self.condition_row(condition)
        start = embedding_lookup(self.class_emb, np.array([row]))
        rest = linear(Tensor(np.asarray(seq_inputs, dtype=cfg.np_dtype)),
                      self.word_w, self.word_b)
        x = concat([start, rest], axis=0)
        ids = np.concatenate([np.full(k * k, i) for i, k in enumerate(cfg.schedule)])
        x = x + self.pos_emb + embedding_lookup(self.scale_emb, ids)
        x = self.blocks(x, self.mask)
        x = layer_norm(x, self.out_ln_g, self.out_ln_b)
        return linear(x, self.head_w, self.head_b)

    def forward_tokens(self, token_map: MultiScaleTokenMap, condition: int) -> Tensor:
        return self.forward(self.scale_inputs(token_map), condition)


# -----------------------------
# Training
# -----------------------------
@dataclass
class ArTrainState:
    model: ArModel
    opt: OptimizerState
    step: int = 0


def ar_train_step(state: ArTrainState, batch: list[tuple[MultiScaleTokenMap, int]]) -> dict:
    """Teacher-forced cross-entropy over all positions of every sequence.

    Returns per-scale loss breakdown and token accuracy; skips the update on
    a non-finite loss.
    """
    model, cfg = state.model, state.model.cfg
    if not batch:
        raise InvalidInputError("empty batch")
    model.zero_grad()
    total = None
    n_positions = cfg.context_length
    per_scale = np.zeros(len(cfg.schedule))
    correct = 0
    for token_map, condition in batch:
        seq = flatten_scales(token_map)
        logits = model.forward_tokens(token_map, condition)
        loss = cross_entropy(logits, seq.tokens)
        total = loss if total is None else total + loss
        pred = logits.data.argmax(axis=1)
        correct += int((pred == seq.tokens).sum())
        z = logits.data
        zmax = z.max(axis=1, keepdims=True)
        nll = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))) - z[np.arange(len(seq.tokens)), seq.tokens]
        for i, sl in enumerate(scale_slices(cfg.schedule)):
            per_scale[i] += nll[sl].mean()
    total = total * (1.0 / len(batch))
    report = {
        "step": state.step,
        "loss": float(total.data),
        "accuracy": correct / (len(batch) * n_positions),
        "per_scale_loss": (per_scale / len(batch)).tolist(),
        "skipped": False,
    }
    if not np.isfinite(total.data):
        report["skipped"] = True
        state.step += 1
        return report
    total.backward()
    adam_step(model.parameters(), state.opt)
    state.step += 1
    return report


# -----------------------------
# Sampling
# -----------------------------
def sample_logits(logits: np.ndarray, rng: np.random.Generator, temperature: float,
                  top_k: int, top_p: float) -> np.ndarray:
    """Draw one token per row. temperature 0 (or top_k == 1) is argmax with
    lowest-index tie-breaking."""
    if top_k < 1:
        raise InvalidInputError("top_k must be >= 1")
    if not (0.0 < top_p <= 1.0):
        raise InvalidInputError("top_p must lie in (0, 1]")
    if temperature < 0:
        raise InvalidInputError("temperature must be >= 0")
    logits = logits.astype(np.float64)
    if temperature == 0.0 or top_k == 1:
        return logits.argmax(axis=1)
    z = logits / temperature
    out = np.empty(z.shape[0], dtype=np.int64)
    v = z.shape[1]
    k = min(top_k, v)
    for i, row in enumerate(z):
        keep = np.sort(np.argpartition(-row, k - 1)[:k])
        probs = np.exp(row[keep] - row[keep].max())
        probs /= probs.sum()
        if top_p < 1.0:
            order = np.argsort(-probs, kind="stable")
            csum = np.cumsum(probs[order])
            cut = int(np.searchsorted(csum, top_p) + 1)
            mask = np.zeros_like(probs)
            mask[order[:cut]] = 1.0
            probs = probs * mask
            probs /= probs.sum()
        out[i] = keep[rng.choice(len(keep), p=probs)]
    return out


def ar_sample(model: ArModel, condition: int, seed: int = 0,
              temperature: float | None = None, top_k: int | None = None,
              top_p: float | None = None) -> MultiScaleTokenMap:
    """Generate a token map scale by scale; all positions of a scale are
    drawn in one step from the coarser-scale context. Deterministic for a
    fixed seed."""
    cfg = model.cfg
    temperature = cfg.temperature if temperature is None else temperature
    top_k = cfg.top_k if top_k is None else top_k
    top_p = cfg.top_p if top_p is None else top_p
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    model.condition_row(condition)  # validate before any compute

    grids: list[np.ndarray] = []
    slices = scale_slices(cfg.schedule)
    for si, k in enumerate(cfg.schedule):
        blocks = model._input_blocks(grids, si)
        seq_inputs = np.concatenate(blocks, axis=0) if blocks else \
            np.zeros((0, cfg.code_dim), dtype=dt)
        pad = np.zeros((cfg.context_length - 1 - seq_inputs.shape[0], cfg.code_dim), dtype=dt)
        logits = model.forward(np.concatenate([seq_inputs, pad], axis=0), condition)
        block_logits = logits.data[slices[si]]
        tokens = sample_logits(block_logits, rng, temperature, top_k, top_p)
        grids.append(tokens.reshape(k, k))
    return MultiScaleTokenMap(grids, tuple(cfg.schedule), cfg.vocab_size)
