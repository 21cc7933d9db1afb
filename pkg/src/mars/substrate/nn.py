"""Neural-net operators over Tensor: forward values with exact reverse-mode
gradients. Everything here is verified against finite differences in the
test suite.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .tensor import Parameter, Tensor

_GELU_C = float(np.sqrt(2.0 / np.pi))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). w has shape (in_features, out_features)."""
    if x.shape[-1] != w.shape[0]:
        raise InvalidInputError(f"linear: {x.shape} incompatible with weight {w.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gaussian error linear unit (fused single op)."""
    d = x.data
    d2 = d * d
    inner = _GELU_C * (d + 0.044715 * (d2 * d))
    t = np.tanh(inner)
    out_data = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return x._make(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise InvalidInputError("layer_norm: gamma/beta must match the last axis")
    d = x.shape[-1]
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out_data = xhat * gd + beta.data

    def backward(g):
        gx_hat = g * gd
        # d/dx of (x - mu) * inv with mu, inv functions of x
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return (gx, ggamma, gbeta)

    return x._make(out_data, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf entries produce exactly-zero weights."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return x._make(out_data, (x,), backward)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table; gradients scatter-add back."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidInputError("embedding index out of range")
    out_data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return table._make(out_data, (table,), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) 2-D convolution via im2col.

    x: (C_in, H, W), kernel: (C_out, C_in, kh, kw) -> (C_out, H', W').
    """
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise InvalidInputError(f"conv2d: kernel expects {kcin} input channels, got {cin}")
    if h < kh or w < kw:
        raise InvalidInputError("conv2d: input smaller than kernel")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1

    # (oh, ow, cin, kh, kw) patch view over a contiguous buffer
    xc = np.ascontiguousarray(x.data)
    s0, s1, s2 = xc.strides
    patches = np.lib.stride_tricks.as_strided(
        xc, shape=(oh, ow, cin, kh, kw),
        strides=(s1 * stride, s2 * stride, s0, s1, s2), writeable=False)
    cols = patches.reshape(oh * ow, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ kmat.T).T.reshape(cout, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(cout, 1, 1)

    def backward(g):
        gflat = g.reshape(cout, oh * ow)
        gk = (gflat @ cols).reshape(kernel.shape)
        gcols = gflat.T @ kmat  # (oh*ow, cin*kh*kw)
        gx = np.zeros_like(x.data)
        gp = gcols.reshape(oh, ow, cin, kh, kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                    gp[:, :, :, i, j].transpose(2, 0, 1)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return x._make(out_data, parents, backward)


def attention_mask_bias(allow: np.ndarray, dtype=np.float32) -> Tensor:
    """Additive bias: 0 where allowed, -inf where forbidden."""
    allow = np.asarray(allow, dtype=bool)
    if allow.ndim != 2:
        raise InvalidInputError("mask must be 2-D (queries x keys)")
    if not allow.any(axis=1).all():
        raise InvalidInputError("mask forbids every key for at least one query")
    bias = np.where(allow, 0.0, -np.inf).astype(dtype)
    return Tensor(bias)


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over (seq, width) or batched
    (batch, seq, width) inputs.

    ``mask`` is a boolean (q_len, kv_len) allow-matrix; forbidden positions
    receive exactly zero attention weight.
    """
    width = q_in.shape[-1]
    if width % heads != 0:
        raise InvalidInputError(f"width {width} not divisible by heads {heads}")
    if q_in.data.ndim not in (2, 3) or kv_in.data.ndim != q_in.data.ndim:
        raise InvalidInputError("attention inputs must both be 2-D or both 3-D")
    dh = width // heads
    batched = q_in.data.ndim == 3
    qs, ks = q_in.shape[-2], kv_in.shape[-2]

    def split(t: Tensor, n: int) -> Tensor:
        if batched:
            b = t.shape[0]
            return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)  # (B, H, S, dh)
        return t.reshape(n, heads, dh).transpose(1, 0, 2)  # (H, S, dh)

    q = split(q_in @ wq, qs)
    k = split(kv_in @ wk, ks)
    v = split(kv_in @ wv, ks)
    kt = k.transpose(0, 1, 3, 2) if batched else k.transpose(0, 2, 1)
    scores = (q @ kt) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + attention_mask_bias(mask, dtype=scores.dtype)
    weights = softmax(scores, axis=-1)
    mixed = weights @ v
    if batched:
        merged = mixed.transpose(0, 2, 1, 3).reshape(q_in.shape[0], qs, width)
    else:
        merged = mixed.transpose(1, 0, 2).reshape(qs, width)
    return merged @ wo


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target entries.

    logits: (N, V); targets: (N,) integer class ids.
    """
    t = np.asarray(targets)
    n, v = logits.shape
    if t.shape != (n,):
        raise InvalidInputError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise InvalidInputError("target id out of vocabulary range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), t]
    out_data = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return logits._make(out_data, (logits,), backward)


def resample2d(x: Tensor, row_mat: np.ndarray, col_mat: np.ndarray) -> Tensor:
    """Contract the two spatial axes with constant resampling matrices:
    out[..., i, j, :] = sum_{a,b} row_mat[i,a] * col_mat[j,b] * x[..., a, b, :].

    Accepts (H, W, d) grids or batched (B, H, W, d); used for
    differentiable area down- and bilinear up-sampling of latent grids.
    """
    r = np.asarray(row_mat, dtype=x.dtype)
    c = np.asarray(col_mat, dtype=x.dtype)
    if x.data.ndim not in (3, 4) or r.shape[1] != x.shape[-3] or c.shape[1] != x.shape[-2]:
        raise InvalidInputError(
            f"resample2d: incompatible shapes x={x.shape}, rows={r.shape}, cols={c.shape}")
    out_data = np.einsum("ia,jb,...abd->...ijd", r, c, x.data, optimize=True)

    def backward(g):
        return (np.einsum("ia,jb,...ijd->...abd", r, c, g, optimize=True),)

    return x._make(out_data, (x,), backward)


def area_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Averaging matrix (dst, src) for integer-factor area downsampling;
    identity when src == dst."""
    if src == dst:
        return np.eye(src, dtype=dtype)
    if src % dst != 0:
        raise InvalidInputError(f"area downsample needs dst | src, got {src}->{dst}")
    f = src // dst
    m = np.zeros((dst, src), dtype=dtype)
    for i in range(dst):
        m[i, i * f:(i + 1) * f] = 1.0 / f
    return m


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Bilinear interpolation matrix (dst, src), half-pixel-centered
    (align_corners=False); exact for constant fields."""
    if src == dst:
        return np.eye(src, dtype=dtype)
    m = np.zeros((dst, src), dtype=dtype)
    for i in range(dst):
        s = (i + 0.5) * src / dst - 0.5
        i0 = int(np.floor(s))
        w = s - i0
        lo = min(max(i0, 0), src - 1)
        hi = min(max(i0 + 1, 0), src - 1)
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


# -----------------------------
# Parameter containers
# -----------------------------
class Model:
    """Flat named-parameter container; names are unique by construction."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add_param(self, name: str, data) -> Parameter:
        if name in self._params:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name=name)
        self._params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in arrays:
                raise InvalidInputError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(p.data.shape):
                raise InvalidInputError(
                    f"parameter {name!r} shape {arrays[name].shape} != {p.data.shape}")
            p.data = arrays[name].astype(p.data.dtype, copy=True)
            p.grad = None


def init_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class TransformerBlocks:
    """Pre-norm attention + MLP stack registering its parameters on a Model."""

    def __init__(self, model: Model, prefix: str, depth: int, width: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.depth = depth
        self.heads = heads
        self.p = {}
        for i in range(depth):
            for name, shape, std in [
                ("ln1_g", (width,), None), ("ln1_b", (width,), 0.0),
                ("wq", (width, width), 0.02), ("wk", (width, width), 0.02),
                ("wv", (width, width), 0.02), ("wo", (width, width), 0.02),
                ("ln2_g", (width,), None), ("ln2_b", (width,), 0.0),
                ("mlp_w1", (width, 4 * width), 0.02), ("mlp_b1", (4 * width,), 0.0),
                ("mlp_w2", (4 * width, width), 0.02), ("mlp_b2", (width,), 0.0),
            ]:
                key = f"{prefix}.{i}.{name}"
                if std is None:
                    data = np.ones(shape, dtype=dtype)
                elif std == 0.0:
                    data = np.zeros(shape, dtype=dtype)
                else:
                    data = init_normal(rng, shape, std, dtype)
                self.p[(i, name)] = model.add_param(key, data)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for i in range(self.depth):
            g = self.p
            h = layer_norm(x, g[(i, "ln1_g")], g[(i, "ln1_b")])
            x = x + multi_head_attention(h, h, g[(i, "wq")], g[(i, "wk")],
                                         g[(i, "wv")], g[(i, "wo")], self.heads, mask)
            h = layer_norm(x, g[(i, "ln2_g")], g[(i, "ln2_b")])
            h = gelu(linear(h, g[(i, "mlp_w1")], g[(i, "mlp_b1")]))
            x = x + linear(h, g[(i, "mlp_w2")], g[(i, "mlp_b2")])
        return x
