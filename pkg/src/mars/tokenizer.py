"""Multi-scale vector-quantizing tokenizer.

Pipeline: patchify -> transformer encoder (patch tokens + learnable tokens)
-> residual multi-scale quantization against one shared codebook ->
transformer decoder -> reconstruction. Training optimizes a weighted sum of
reconstruction, vector-quantization, and (optional) adversarial terms.

All model stages run batched internally; the single-item entry points wrap a
batch of one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .cmx import CmxDescriptor, PackedTensor, cmx_pack, cmx_unpack
from .errors import InvalidConfigError, InvalidInputError, IoError
from .substrate import (
    Model,
    OptimizerState,
    Tensor,
    TransformerBlocks,
    adam_step,
    area_matrix,
    bilinear_matrix,
    concat,
    conv2d,
    embedding_lookup,
    gelu,
    init_normal,
    layer_norm,
    linear,
    resample2d,
    stopgrad,
)

TOKENS_MAGIC = b"MARSTOKS"


# -----------------------------
# Configuration and token maps
# -----------------------------
@dataclass(frozen=True)
class TokenizerConfig:
    channels: int = 2
    grid: int = 256           # spatial side M of the packed input
    patch: int = 16           # patch side L
    learnable_tokens: int = 4  # extra encoder/decoder tokens
    width: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 2
    heads: int = 4
    codebook_size: int = 1024
    code_dim: int = 16
    schedule: tuple[int, ...] = (1, 2, 4, 8, 16)
    lambda_recon: float = 1.0
    lambda_vq: float = 1.0
    lambda_ad: float = 0.0
    beta: float = 0.25
    dead_code_steps: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        if self.grid % self.patch != 0:
            raise InvalidConfigError(f"patch {self.patch} does not divide grid {self.grid}")
        if self.width % self.heads != 0:
            raise InvalidConfigError("width must be divisible by heads")
        if self.codebook_size < 2:
            raise InvalidConfigError("codebook needs at least 2 entries")
        k = self.tokens_per_side
        if list(self.schedule) != sorted(set(self.schedule)):
            raise InvalidConfigError("schedule must be strictly ascending")
        if self.schedule[-1] != k:
            raise InvalidConfigError(f"schedule must end at full grid {k}, got {self.schedule[-1]}")
        for s in self.schedule:
            if k % s != 0:
                raise InvalidConfigError(f"schedule entry {s} does not divide grid side {k}")
        if min(self.lambda_recon, self.lambda_vq, self.lambda_ad, self.beta) < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")

    @property
    def tokens_per_side(self) -> int:
        return self.grid // self.patch

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class MultiScaleTokenMap:
    """Code indices per scale: grids[i] has shape (schedule[i], schedule[i])."""

    grids: list[np.ndarray]
    schedule: tuple[int, ...]
    codebook_size: int = 1024

    def __post_init__(self):
        if len(self.grids) != len(self.schedule):
            raise InvalidInputError("one grid per schedule entry required")
        norm = []
        for g, k in zip(self.grids, self.schedule):
            g = np.asarray(g, dtype=np.int64)
            if g.shape != (k, k):
                raise InvalidInputError(f"grid shape {g.shape} does not match scale {k}")
            if g.size and (g.min() < 0 or g.max() >= self.codebook_size):
                raise InvalidInputError("token index out of codebook range")
            norm.append(g)
        self.grids = norm

    def to_bytes(self) -> bytes:
        chunks = [TOKENS_MAGIC, struct.pack("<I", len(self.schedule))]
        chunks.append(struct.pack(f"<{len(self.schedule)}I", *self.schedule))
        for g in self.grids:
            chunks.append(g.astype("<u4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes, codebook_size: int = 1024) -> "MultiScaleTokenMap":
        if len(raw) < 12 or raw[:8] != TOKENS_MAGIC:
            raise IoError("not a token-map record")
        (n,) = struct.unpack_from("<I", raw, 8)
        schedule = struct.unpack_from(f"<{n}I", raw, 12)
        pos = 12 + 4 * n
        grids = []
        for k in schedule:
            count = k * k
            if pos + 4 * count > len(raw):
                raise IoError("truncated token-map record")
            grids.append(np.frombuffer(raw, dtype="<u4", count=count, offset=pos)
                         .astype(np.int64).reshape(k, k))
            pos += 4 * count
        return cls(grids, tuple(schedule), codebook_size)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, codebook_size: int = 1024):
        return cls.from_bytes(Path(path).read_bytes(), codebook_size)


# -----------------------------
# Patch layout
# -----------------------------
def patchify(x: Tensor | np.ndarray, patch: int) -> Tensor:
    """(C, M, M) -> (K, K, C*patch^2), or batched (B, C, M, M) ->
    (B, K, K, C*patch^2); patches are row-major."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 3:
        c, m, m2 = t.shape
        if m != m2 or m % patch != 0:
            raise InvalidInputError(f"spatial dims {m}x{m2} not divisible into {patch}-patches")
        k = m // patch
        return (t.reshape(c, k, patch, k, patch)
                 .transpose(1, 3, 0, 2, 4)
                 .reshape(k, k, c * patch * patch))
    b, c, m, m2 = t.shape
    if m != m2 or m % patch != 0:
        raise InvalidInputError(f"spatial dims {m}x{m2} not divisible into {patch}-patches")
    k = m // patch
    return (t.reshape(b, c, k, patch, k, patch)
             .transpose(0, 2, 4, 1, 3, 5)
             .reshape(b, k, k, c * patch * patch))


def unpatchify(grid: Tensor, channels: int, patch: int) -> Tensor:
    """Inverse of patchify for both layouts."""
    if grid.data.ndim == 3:
        k = grid.shape[0]
        return (grid.reshape(k, k, channels, patch, patch)
                    .transpose(2, 0, 3, 1, 4)
                    .reshape(channels, k * patch, k * patch))
    b, k = grid.shape[0], grid.shape[1]
    return (grid.reshape(b, k, k, channels, patch, patch)
                .transpose(0, 3, 1, 4, 2, 5)
                .reshape(b, channels, k * patch, k * patch))


# -----------------------------
# Quantization
# -----------------------------
def nearest_code_indices(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the squared-Euclidean-nearest codebook row per vector;
    ties break to the lowest index.

    Distances use the expanded form for speed; rows whose minimum is
    ambiguous at roundoff are re-resolved with exact direct distances so the
    tie rule holds bit-for-bit.
    """
    v2 = (vectors ** 2).sum(axis=1, keepdims=True)
    e2 = (codebook ** 2).sum(axis=1)
    d = v2 - 2.0 * vectors @ codebook.T + e2
    idx = np.argmin(d, axis=1)
    dmin = d[np.arange(len(d)), idx]
    tol = 1e-9 * (1.0 + np.abs(dmin))
    for i in np.flatnonzero((d <= (dmin + tol)[:, None]).sum(axis=1) > 1):
        cands = np.flatnonzero(d[i] <= dmin[i] + tol[i])
        exact = ((vectors[i] - codebook[cands]) ** 2).sum(axis=1)
        idx[i] = cands[np.argmin(exact)]
    return idx


def quantize_nearest(vectors: Tensor, codebook: Tensor) -> tuple[np.ndarray, Tensor]:
    """Nearest-code lookup with a straight-through gradient: the returned
    tensor carries the codebook values forward but passes gradients to
    ``vectors`` unchanged. Indices keep the input's leading shape."""
    lead = vectors.shape[:-1]
    flat = vectors.data.reshape(-1, vectors.shape[-1])
    idx = nearest_code_indices(flat.astype(np.float64), codebook.data.astype(np.float64))
    codes = codebook.data[idx].reshape(vectors.shape)
    quantized = vectors + Tensor(codes - vectors.data)
    return idx.reshape(lead), quantized


@dataclass
class QuantizeResult:
    token_maps: list[MultiScaleTokenMap]
    z_q: Tensor                     # (..., K, K, code_dim), straight-through
    codebook_loss: Tensor           # pulls codes toward encoder outputs
    commitment_loss: Tensor         # pulls encoder outputs toward codes
    residual_norms: list[float] = field(default_factory=list)

    @property
    def token_map(self) -> MultiScaleTokenMap:
        return self.token_maps[0]


def multiscale_quantize(
    z: Tensor,
    codebook: Tensor,
    schedule: tuple[int, ...],
    quantizer=None,
) -> QuantizeResult:
    """Residual quantization over a scale pyramid with one shared codebook.

    For each scale k: area-downsample the residual to (k, k), quantize,
    bilinear-upsample back to the full grid, and accumulate. Accepts a
    single (K, K, d) grid or a batch (B, K, K, d). ``quantizer`` may be
    replaced (e.g. an identity stub) for testing; it maps a tensor to
    (indices | None, quantized tensor).
    """
    batched = z.data.ndim == 4
    k_full = z.shape[-2]
    if z.shape[-3] != k_full:
        raise InvalidInputError("latent grid must be square")
    if schedule[-1] != k_full:
        raise InvalidInputError(f"schedule must end at {k_full}")
    dt = z.data.dtype
    nb = z.shape[0] if batched else 1

    quantize = quantizer or (lambda rk: quantize_nearest(rk, codebook))
    zero = Tensor(np.zeros((), dtype=dt))
    z_hat = Tensor(np.zeros_like(z.data))
    codebook_loss = zero
    commitment_loss = zero
    per_scale_idx: list[np.ndarray | None] = []
    norms: list[float] = []

    for k in schedule:
        residual = z - z_hat
        down = area_matrix(k_full, k, dt)
        rk = resample2d(residual, down, down)
        idx, qk = quantize(rk)
        per_scale_idx.append(idx)
        if idx is not None:
            codes = embedding_lookup(codebook, idx.reshape(-1)).reshape(rk.shape)
            codebook_loss = codebook_loss + ((codes - stopgrad(rk)) ** 2).mean()
            commitment_loss = commitment_loss + ((rk - stopgrad(codes)) ** 2).mean()
        up = bilinear_matrix(k, k_full, dt)
        z_hat = z_hat + resample2d(qk, up, up)
        norms.append(float(np.linalg.norm(z.data - z_hat.data)))

    n = float(len(schedule))
    v = codebook.shape[0]
    token_maps = []
    if all(i is not None for i in per_scale_idx):
        for b in range(nb):
            grids = [(idx[b] if batched else idx) for idx in per_scale_idx]
            token_maps.append(MultiScaleTokenMap(grids, tuple(schedule), v))
    return QuantizeResult(token_maps, z_hat, codebook_loss * (1.0 / n),
                          commitment_loss * (1.0 / n), norms)


# -----------------------------
# Encoder / decoder model
# -----------------------------
class Tokenizer(Model):
    """Encoder, shared codebook, and decoder with named parameters."""

    def __init__(self, cfg: TokenizerConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        k2 = cfg.tokens_per_side ** 2
        w = cfg.width

        self.patch_w = self.add_param("enc.patch_w", init_normal(rng, (cfg.patch_dim, w), 0.02, dt))
        self.patch_b = self.add_param("enc.patch_b", np.zeros(w, dtype=dt))
        self.enc_pos = self.add_param("enc.pos", init_normal(rng, (k2, w), 0.02, dt))
        self.enc_tokens = self.add_param("enc.learn_tokens",
                                         init_normal(rng, (cfg.learnable_tokens, w), 0.02, dt))
        self.encoder = TransformerBlocks(self, "enc.block", cfg.encoder_depth, w, cfg.heads, rng, dt)
        self.enc_ln_g = self.add_param("enc.out_ln_g", np.ones(w, dtype=dt))
        self.enc_ln_b = self.add_param("enc.out_ln_b", np.zeros(w, dtype=dt))
        self.to_code_w = self.add_param("enc.to_code_w", init_normal(rng, (w, cfg.code_dim), 0.02, dt))
        self.to_code_b = self.add_param("enc.to_code_b", np.zeros(cfg.code_dim, dtype=dt))

        self.codebook = self.add_param("quant.codebook",
                                       init_normal(rng, (cfg.codebook_size, cfg.code_dim), 0.1, dt))

        self.from_code_w = self.add_param("dec.from_code_w", init_normal(rng, (cfg.code_dim, w), 0.02, dt))
        self.from_code_b = self.add_param("dec.from_code_b", np.zeros(w, dtype=dt))
        self.dec_pos = self.add_param("dec.pos", init_normal(rng, (k2, w), 0.02, dt))
        self.dec_tokens = self.add_param("dec.learn_tokens",
                                         init_normal(rng, (cfg.learnable_tokens, w), 0.02, dt))
        self.decoder = TransformerBlocks(self, "dec.block", cfg.decoder_depth, w, cfg.heads, rng, dt)
        self.dec_ln_g = self.add_param("dec.out_ln_g", np.ones(w, dtype=dt))
        self.dec_ln_b = self.add_param("dec.out_ln_b", np.zeros(w, dtype=dt))
        self.head_w = self.add_param("dec.head_w", init_normal(rng, (w, cfg.patch_dim), 0.02, dt))
        self.head_b = self.add_param("dec.head_b", np.zeros(cfg.patch_dim, dtype=dt))

        # codebook bookkeeping for dead-code reseeding
        self.code_last_used = np.zeros(cfg.codebook_size, dtype=np.int64)
        self.code_usage = np.zeros(cfg.codebook_size, dtype=np.int64)

    # ---- batched stages ----
    def _broadcast_tokens(self, tokens: Tensor, b: int) -> Tensor:
        pad = Tensor(np.zeros((b,) + tuple(tokens.shape), dtype=tokens.data.dtype))
        return pad + tokens

    def encode_batch(self, xb: Tensor | np.ndarray) -> Tensor:
        """(B, C, M, M) -> latent grids (B, K, K, code_dim)."""
        cfg = self.cfg
        t = xb if isinstance(xb, Tensor) else Tensor(np.asarray(xb, dtype=cfg.np_dtype))
        if t.data.ndim != 4 or tuple(t.shape[1:]) != (cfg.channels, cfg.grid, cfg.grid):
            raise InvalidInputError(
                f"encode expects (B, {cfg.channels}, {cfg.grid}, {cfg.grid}), got {tuple(t.shape)}")
        b = t.shape[0]
        k = cfg.tokens_per_side
        patches = patchify(t, cfg.patch).reshape(b, k * k, cfg.patch_dim)
        tokens = linear(patches, self.patch_w, self.patch_b) + self.enc_pos
        seq = concat([tokens, self._broadcast_tokens(self.enc_tokens, b)], axis=1)
        seq = self.encoder(seq)
        out = seq[:, : k * k]  # learnable tokens are dropped after encoding
        out = layer_norm(out, self.enc_ln_g, self.enc_ln_b)
        z = linear(out, self.to_code_w, self.to_code_b)
        return z.reshape(b, k, k, cfg.code_dim)

    def decode_batch(self, z_q: Tensor) -> Tensor:
        """(B, K, K, code_dim) -> packed reconstructions (B, C, M, M)."""
        cfg = self.cfg
        k = cfg.tokens_per_side
        if z_q.data.ndim != 4 or tuple(z_q.shape[1:]) != (k, k, cfg.code_dim):
            raise InvalidInputError(
                f"decode expects (B, {k}, {k}, {cfg.code_dim}), got {tuple(z_q.shape)}")
        b = z_q.shape[0]
        tokens = linear(z_q.reshape(b, k * k, cfg.code_dim), self.from_code_w, self.from_code_b)
        seq = concat([tokens + self.dec_pos, self._broadcast_tokens(self.dec_tokens, b)], axis=1)
        seq = self.decoder(seq)
        out = layer_norm(seq[:, : k * k], self.dec_ln_g, self.dec_ln_b)
        flat = linear(out, self.head_w, self.head_b)
        return unpatchify(flat.reshape(b, k, k, cfg.patch_dim), cfg.channels, cfg.patch)

    def forward_batch(self, xb: Tensor | np.ndarray):
        z = self.encode_batch(xb)
        q = multiscale_quantize(z, self.codebook, self.cfg.schedule)
        return self.decode_batch(q.z_q), q, z

    # ---- single-item entry points ----
    def encode(self, x: Tensor | np.ndarray) -> Tensor:
        """Packed input (C, M, M) -> latent grid (K, K, code_dim)."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        k = self.cfg.tokens_per_side
        return self.encode_batch(t.reshape((1,) + tuple(t.shape))) \
            .reshape(k, k, self.cfg.code_dim)

    def quantize(self, z: Tensor) -> QuantizeResult:
        return multiscale_quantize(z, self.codebook, self.cfg.schedule)

    def decode(self, z_q: Tensor) -> Tensor:
        """Latent grid (K, K, code_dim) -> packed reconstruction (C, M, M)."""
        cfg = self.cfg
        out = self.decode_batch(z_q.reshape((1,) + tuple(z_q.shape)))
        return out.reshape(cfg.channels, cfg.grid, cfg.grid)

    def forward(self, x: Tensor | np.ndarray):
        z = self.encode(x)
        q = self.quantize(z)
        return self.decode(q.z_q), q, z

    def tokens_for(self, x: np.ndarray) -> MultiScaleTokenMap:
        _, q, _ = self.forward(np.asarray(x, dtype=self.cfg.np_dtype))
        return q.token_map

    def decode_tokens(self, token_map: MultiScaleTokenMap) -> np.ndarray:
        """Rebuild the packed tensor from discrete indices alone."""
        cfg = self.cfg
        k_full = cfg.tokens_per_side
        dt = cfg.np_dtype
        z_hat = np.zeros((k_full, k_full, cfg.code_dim), dtype=dt)
        for k, grid in zip(token_map.schedule, token_map.grids):
            codes = self.codebook.data[grid.reshape(-1)].reshape(k, k, cfg.code_dim)
            up = bilinear_matrix(k, k_full, dt)
            z_hat = z_hat + np.einsum("ia,jb,abd->ijd", up, up, codes, optimize=True)
        return self.decode(Tensor(z_hat)).data


# -----------------------------
# Losses and training
# -----------------------------
def tokenizer_loss(
    x: Tensor | np.ndarray,
    x_hat: Tensor,
    q: QuantizeResult,
    cfg: TokenizerConfig,
    disc_scores: Tensor | None = None,
):
    """Weighted objective: recon (L2) + vq (codebook + beta*commit) +
    adversarial (non-saturating on patch scores). Returns (total Tensor,
    component floats)."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.data.dtype))
    if xt.shape != x_hat.shape:
        raise InvalidInputError(f"shape mismatch {xt.shape} vs {x_hat.shape}")
    recon = ((x_hat - xt) ** 2).mean()
    vq = q.codebook_loss + q.commitment_loss * cfg.beta
    if disc_scores is not None and cfg.lambda_ad > 0:
        adv = (-disc_scores).softplus().mean()
    else:
        adv = Tensor(np.zeros((), dtype=x_hat.data.dtype))
    total = recon * cfg.lambda_recon + vq * cfg.lambda_vq + adv * cfg.lambda_ad
    parts = {
        "recon": float(recon.data),
        "vq": float(vq.data),
        "codebook": float(q.codebook_loss.data),
        "commitment": float(q.commitment_loss.data),
        "adversarial": float(adv.data),
        "total": float(total.data),
    }
    return total, parts


class PatchDiscriminator(Model):
    """Small strided-convolution stack scoring realism per spatial patch."""

    def __init__(self, channels: int, seed: int = 0, dtype=np.float32, base: int = 8):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.k1 = self.add_param("disc.k1", init_normal(rng, (base, channels, 4, 4), 0.05, dtype))
        self.b1 = self.add_param("disc.b1", np.zeros(base, dtype=dtype))
        self.k2 = self.add_param("disc.k2", init_normal(rng, (2 * base, base, 4, 4), 0.05, dtype))
        self.b2 = self.add_param("disc.b2", np.zeros(2 * base, dtype=dtype))
        self.k3 = self.add_param("disc.k3", init_normal(rng, (1, 2 * base, 3, 3), 0.05, dtype))
        self.b3 = self.add_param("disc.b3", np.zeros(1, dtype=dtype))

    def scores(self, x: Tensor | np.ndarray) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        h = gelu(conv2d(t, self.k1, stride=2, bias=self.b1))
        h = gelu(conv2d(h, self.k2, stride=2, bias=self.b2))
        s = conv2d(h, self.k3, stride=1, bias=self.b3)
        return s.reshape(s.shape[1], s.shape[2])


def discriminator_hinge_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return (1.0 - real_scores).relu().mean() + (1.0 + fake_scores).relu().mean()


@dataclass
class TokenizerTrainState:
    model: Tokenizer
    opt: OptimizerState
    disc: PatchDiscriminator | None = None
    disc_opt: OptimizerState | None = None
    step: int = 0


def train_tokenizer_step(state: TokenizerTrainState, batch: np.ndarray, seed: int = 0) -> dict:
    """One optimization step over a (B, C, M, M) batch; returns a loss report.

    A non-finite loss skips the update. Codebook usage is tracked and codes
    unused for cfg.dead_code_steps steps are reseeded from the batch's
    encoder outputs.
    """
    model, cfg = state.model, state.model.cfg
    batch = np.asarray(batch, dtype=cfg.np_dtype)
    if batch.ndim != 4:
        raise InvalidInputError("batch must be (B, C, M, M)")

    model.zero_grad()
    x_hat, q, z = model.forward_batch(batch)
    train_disc = state.disc is not None and cfg.lambda_ad > 0
    scores = None
    if train_disc:
        score_rows = [state.disc.scores(x_hat[i]) for i in range(batch.shape[0])]
        flat = [s.reshape(int(np.prod(s.shape))) for s in score_rows]
        scores = concat(flat, axis=0)
    total, parts = tokenizer_loss(batch, x_hat, q, cfg, scores)

    report = {"step": state.step, "skipped": False, **parts}
    if not np.isfinite(total.data):
        report["skipped"] = True
        state.step += 1
        return report

    total.backward()
    adam_step(model.parameters(), state.opt)

    if train_disc:
        state.disc.zero_grad()
        d_total = None
        for i in range(batch.shape[0]):
            d = discriminator_hinge_loss(state.disc.scores(batch[i]),
                                         state.disc.scores(Tensor(x_hat.data[i])))
            d_total = d if d_total is None else d_total + d
        d_total = d_total * (1.0 / batch.shape[0])
        report["disc_loss"] = float(d_total.data)
        d_total.backward()
        adam_step(state.disc.parameters(), state.disc_opt)

    # usage bookkeeping and dead-code reseeding
    used = np.zeros(cfg.codebook_size, dtype=np.int64)
    for tm in q.token_maps:
        for g in tm.grids:
            used[np.unique(g)] += 1
    model.code_usage += used
    model.code_last_used[used > 0] = state.step
    dead = np.flatnonzero(state.step - model.code_last_used >= cfg.dead_code_steps)
    if dead.size:
        pool = z.data.reshape(-1, cfg.code_dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, state.step]))
        picks = rng.integers(0, pool.shape[0], size=dead.size)
        model.codebook.data[dead] = pool[picks]
        model.code_last_used[dead] = state.step
        for store in (state.opt.m, state.opt.v):
            if model.codebook.name in store:
                store[model.codebook.name][dead] = 0.0
        report["reseeded"] = int(dead.size)

    state.step += 1
    return report


# -----------------------------
# Audio <-> tokens composition
# -----------------------------
@dataclass
class CodecConfig:
    """Everything needed to run audio through the tokenizer and back."""

    stft: dsp.StftConfig
    descriptor: CmxDescriptor
    sample_rate: int = 16000
    target_frames: int = 256
    norm_mean: float = 0.0
    norm_std: float = 1.0
    griffin_lim_iters: int = 64

    def __post_init__(self):
        if self.norm_std <= 0:
            raise InvalidConfigError("norm_std must be positive")


def pack_waveform(w: dsp.Waveform, codec: CodecConfig) -> PackedTensor:
    """stft -> log1p magnitude -> normalize -> channel-multiplex.

    The waveform tail is zero-padded (or cropped) so the spectrogram has
    exactly target_frames columns.
    """
    want = codec.target_frames * codec.stft.hop
    x = w.samples
    x = np.pad(x, (0, want - len(x))) if len(x) < want else x[:want]
    spec = dsp.magnitude(dsp.stft(dsp.Waveform(x, w.sample_rate), codec.stft), scale="log1p")
    values = (spec.values - codec.norm_mean) / codec.norm_std
    _, h, wd = codec.descriptor.in_shape
    if values.shape != (h, wd):
        raise InvalidInputError(
            f"spectrogram {values.shape} does not match descriptor input {(h, wd)}")
    return cmx_pack(values[None, :, :], codec.descriptor)


def unpack_to_waveform(packed_values: np.ndarray, codec: CodecConfig, seed: int = 0) -> dsp.Waveform:
    """Invert pack_waveform: un-multiplex, denormalize, expm1 (clamped to
    non-negative), then Griffin-Lim."""
    packed = PackedTensor(np.asarray(packed_values, dtype=np.float64), codec.descriptor)
    values = cmx_unpack(packed)[0]
    log_mag = values * codec.norm_std + codec.norm_mean
    mag = np.maximum(np.expm1(log_mag), 0.0)
    spec = dsp.Spectrogram(mag, codec.stft, "linear")
    return dsp.griffin_lim(spec, iters=codec.griffin_lim_iters, seed=seed,
                           sample_rate=codec.sample_rate,
                           length=codec.target_frames * codec.stft.hop)


def tokenize(w: dsp.Waveform, model: Tokenizer, codec: CodecConfig) -> MultiScaleTokenMap:
    packed = pack_waveform(w, codec)
    return model.tokens_for(packed.values)


def detokenize(token_map: MultiScaleTokenMap, model: Tokenizer, codec: CodecConfig,
               seed: int = 0) -> dsp.Waveform:
    packed = model.decode_tokens(token_map)
    return unpack_to_waveform(packed, codec, seed)
