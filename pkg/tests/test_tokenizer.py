import numpy as np
import pytest

from mars.errors import InvalidConfigError, InvalidInputError
from mars.substrate import OptimizerState, Tensor, gradient_check
from mars.tokenizer import (
    MultiScaleTokenMap,
    PatchDiscriminator,
    Tokenizer,
    TokenizerConfig,
    TokenizerTrainState,
    multiscale_quantize,
    nearest_code_indices,
    patchify,
    quantize_nearest,
    tokenizer_loss,
    train_tokenizer_step,
    unpatchify,
)


def toy_config(**kw) -> TokenizerConfig:
    base = dict(channels=2, grid=32, patch=8, learnable_tokens=2, width=32,
                encoder_depth=1, decoder_depth=1, heads=2, codebook_size=32,
                code_dim=8, schedule=(1, 2, 4))
    base.update(kw)
    return TokenizerConfig(**base)


# ---- patch layout ----
def test_patchify_shapes_standard_config(rng):
    x = rng.standard_normal((2, 256, 256))
    grid = patchify(x, 16)
    assert grid.shape == (16, 16, 512)


def test_patchify_single_patch(rng):
    x = rng.standard_normal((3, 8, 8))
    grid = patchify(x, 8)
    assert grid.shape == (1, 1, 192)


def test_unpatchify_inverts_patchify(rng):
    x = rng.standard_normal((2, 32, 32))
    grid = patchify(x, 8)
    assert np.array_equal(unpatchify(grid, 2, 8).data, x)


def test_patchify_row_major_order():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    grid = patchify(x, 2).data
    assert grid[0, 0].tolist() == [0, 1, 4, 5]
    assert grid[0, 1].tolist() == [2, 3, 6, 7]
    assert grid[1, 0].tolist() == [8, 9, 12, 13]


def test_patchify_rejects_indivisible(rng):
    with pytest.raises(InvalidInputError):
        patchify(rng.standard_normal((1, 10, 10)), 3)


# ---- nearest-code quantization ----
def test_exact_codebook_row_maps_to_itself(rng):
    codebook = rng.standard_normal((8, 4))
    idx = nearest_code_indices(codebook[3][None], codebook)
    assert idx[0] == 3


def test_tie_breaks_to_lowest_index():
    codebook = np.array([[0.0, 0], [1, 0], [-1, 0], [1, 0]])
    # query equidistant to rows 1, 2, and 3; lowest wins
    idx = nearest_code_indices(np.array([[0.0, 5.0]]), codebook)
    assert idx[0] == 0  # row 0 is strictly nearer here
    idx = nearest_code_indices(np.array([[0.0, 0.0]]), np.array([[1.0, 0], [1, 0], [-1, 0]]))
    assert idx[0] == 0


def test_nearest_matches_brute_force(rng):
    codebook = rng.standard_normal((64, 6))
    queries = rng.standard_normal((200, 6))
    fast = nearest_code_indices(queries, codebook)
    brute = np.array([
        min(range(64), key=lambda j: float(((q - codebook[j]) ** 2).sum()))
        for q in queries
    ])
    assert np.array_equal(fast, brute)


def test_quantize_nearest_straight_through(rng):
    codebook = Tensor(rng.standard_normal((16, 4)))
    v = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    idx, q = quantize_nearest(v, codebook)
    assert q.data.shape == (5, 4)
    coef = rng.standard_normal((5, 4))
    (q * Tensor(coef)).sum().backward()
    assert np.array_equal(v.grad, coef)  # identity pass-through


# ---- multi-scale residual quantization ----
def test_single_scale_degenerates_to_plain_quantize(rng):
    codebook = Tensor(rng.standard_normal((16, 4)))
    z = Tensor(rng.standard_normal((4, 4, 4)))
    res = multiscale_quantize(z, codebook, (4,))
    idx, q = quantize_nearest(z, codebook)
    assert np.array_equal(res.token_map.grids[0], idx)
    assert np.allclose(res.z_q.data, q.data)


def test_identity_stub_reconstructs_exactly(rng):
    codebook = Tensor(rng.standard_normal((16, 4)))
    z = Tensor(rng.standard_normal((8, 8, 4)))
    res = multiscale_quantize(z, codebook, (1, 2, 4, 8),
                              quantizer=lambda rk: (None, rk))
    assert np.allclose(res.z_q.data, z.data, atol=1e-12)
    assert res.residual_norms[-1] == pytest.approx(0.0, abs=1e-12)
    assert res.token_maps == []


def test_two_scale_hand_trace(rng):
    # independent plain-numpy execution of the residual procedure
    K, V, d = 2, 4, 2
    z = np.array([[[1.0, 0.0], [0.0, 1.0]],
                  [[-1.0, 0.5], [0.5, -0.5]]])
    codebook = np.array([[0.2, 0.2], [1.0, 0.0], [-0.8, 0.4], [0.0, -0.6]])

    def nearest(vec):
        d2 = ((codebook - vec) ** 2).sum(axis=1)
        return int(d2.argmin())

    z_hat = np.zeros_like(z)
    expect_indices = []
    # scale 1: residual mean -> one code, broadcast back
    r = z - z_hat
    mean_vec = r.reshape(-1, d).mean(axis=0)
    i0 = nearest(mean_vec)
    expect_indices.append(np.array([[i0]]))
    z_hat = z_hat + codebook[i0][None, None, :]
    # scale 2: per-cell residual quantization at full resolution
    r = z - z_hat
    grid = np.empty((K, K), dtype=int)
    for a in range(K):
        for b in range(K):
            grid[a, b] = nearest(r[a, b])
            z_hat[a, b] += codebook[grid[a, b]]
    expect_indices.append(grid)

    res = multiscale_quantize(Tensor(z), Tensor(codebook), (1, 2))
    assert np.array_equal(res.token_map.grids[0], expect_indices[0])
    assert np.array_equal(res.token_map.grids[1], expect_indices[1])
    assert np.allclose(res.z_q.data, z_hat, atol=1e-12)


def test_straight_through_gradient_reaches_encoder_latent(rng):
    codebook = Tensor(rng.standard_normal((8, 3)))
    z = Tensor(rng.standard_normal((4, 4, 3)), requires_grad=True)
    res = multiscale_quantize(z, codebook, (4,))
    coef = rng.standard_normal((4, 4, 3))
    (res.z_q * Tensor(coef)).sum().backward()
    assert np.array_equal(z.grad, res.z_q.grad)
    assert np.array_equal(z.grad, coef)


# ---- encoder / decoder ----
def test_encode_decode_shape_contracts(rng):
    cfg = toy_config()
    tok = Tokenizer(cfg, seed=0)
    x = rng.standard_normal((2, 32, 32)).astype(np.float32)
    z = tok.encode(x)
    assert z.shape == (4, 4, 8)
    out = tok.decode(z)
    assert out.shape == (2, 32, 32)
    with pytest.raises(InvalidInputError):
        tok.encode(rng.standard_normal((2, 16, 16)))
    with pytest.raises(InvalidInputError):
        tok.decode(Tensor(rng.standard_normal((3, 3, 8))))


def test_encode_sensitive_to_input(rng):
    cfg = toy_config()
    tok = Tokenizer(cfg, seed=0)
    x = rng.standard_normal((2, 32, 32)).astype(np.float32)
    y = x.copy()
    y[:, :8, :8] = y[:, 8:16, :8]  # swap patch content
    za, zb = tok.encode(x), tok.encode(y)
    assert not np.allclose(za.data, zb.data)


def test_decode_deterministic(rng):
    tok = Tokenizer(toy_config(), seed=0)
    z = Tensor(rng.standard_normal((4, 4, 8)).astype(np.float32))
    assert np.array_equal(tok.decode(z).data, tok.decode(z).data)


def test_gradient_check_through_encode_and_decode(rng):
    cfg = toy_config(channels=1, grid=8, patch=4, width=8, heads=2,
                     learnable_tokens=1, codebook_size=8, code_dim=4,
                     schedule=(1, 2), dtype="float64")
    tok = Tokenizer(cfg, seed=0)
    x = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
    err_enc = gradient_check(lambda t: (tok.encode(t) ** 2).sum(), [x])
    assert err_enc < 1e-6
    z = Tensor(rng.standard_normal((2, 2, 4)), requires_grad=True)
    err_dec = gradient_check(lambda t: (tok.decode(t) ** 2).sum(), [z])
    assert err_dec < 1e-6


# ---- losses ----
def test_loss_zero_when_perfect(rng):
    cfg = toy_config()
    x = rng.standard_normal((2, 32, 32))
    zero = Tensor(np.zeros(()))
    from mars.tokenizer import QuantizeResult

    q = QuantizeResult([], Tensor(np.zeros((4, 4, 8))), zero, zero)
    total, parts = tokenizer_loss(x, Tensor(x.copy()), q, cfg)
    assert total.data == pytest.approx(0.0)
    assert parts["total"] == 0.0


def test_loss_reduces_to_mse_when_only_recon(rng):
    cfg = toy_config(lambda_recon=1.0, lambda_vq=0.0, lambda_ad=0.0)
    x = rng.standard_normal((2, 32, 32))
    x_hat = x + 0.5
    from mars.tokenizer import QuantizeResult

    q = QuantizeResult([], Tensor(np.zeros(())),
                       Tensor(np.array(3.0)), Tensor(np.array(5.0)))
    total, parts = tokenizer_loss(x, Tensor(x_hat), q, cfg)
    assert total.data == pytest.approx(0.25)
    assert parts["recon"] == pytest.approx(0.25)


def test_loss_decomposition_matches_hand_sum(rng):
    cfg = toy_config(lambda_recon=0.7, lambda_vq=1.3, lambda_ad=0.0, beta=0.25)
    x = rng.standard_normal((2, 32, 32))
    x_hat = Tensor(rng.standard_normal((2, 32, 32)))
    from mars.tokenizer import QuantizeResult

    cb, cm = 0.37, 0.81
    q = QuantizeResult([], Tensor(np.zeros(())),
                       Tensor(np.array(cb)), Tensor(np.array(cm)))
    total, parts = tokenizer_loss(x, x_hat, q, cfg)
    recon = float(((x_hat.data - x) ** 2).mean())
    expect = 0.7 * recon + 1.3 * (cb + 0.25 * cm)
    assert total.data == pytest.approx(expect, rel=1e-12)
    assert parts["total"] == pytest.approx(
        cfg.lambda_recon * parts["recon"] + cfg.lambda_vq * parts["vq"]
        + cfg.lambda_ad * parts["adversarial"], rel=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(InvalidConfigError):
        toy_config(lambda_vq=-1.0)


# ---- discriminator ----
def test_discriminator_emits_score_grid(rng):
    disc = PatchDiscriminator(channels=2, seed=0)
    scores = disc.scores(rng.standard_normal((2, 32, 32)).astype(np.float32))
    assert scores.data.ndim == 2
    assert min(scores.data.shape) > 1  # a grid, not a scalar


def test_discriminator_gradient_check(rng):
    disc = PatchDiscriminator(channels=1, seed=0, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 24, 24)), requires_grad=True)
    err = gradient_check(lambda t: disc.scores(t).sum(), [x])
    assert err < 1e-6


def test_discriminator_separates_real_from_fake(rng):
    from mars.tokenizer import discriminator_hinge_loss
    from mars.substrate import adam_step

    disc = PatchDiscriminator(channels=1, seed=0)
    opt = OptimizerState(lr=2e-3)
    t = np.linspace(0, 4 * np.pi, 24)
    real_pool = [np.outer(np.sin(t + p), np.cos(t)).astype(np.float32)[None]
                 for p in np.linspace(0, 3, 8)]
    fake_pool = [rng.standard_normal((1, 24, 24)).astype(np.float32) for _ in range(8)]
    for step in range(500):
        real = real_pool[step % 8]
        fake = fake_pool[step % 8]
        disc.zero_grad()
        loss = discriminator_hinge_loss(disc.scores(real), disc.scores(fake))
        loss.backward()
        adam_step(disc.parameters(), opt)
    real_mean = np.mean([disc.scores(r).data.mean() for r in real_pool])
    fake_mean = np.mean([disc.scores(f).data.mean() for f in fake_pool])
    assert real_mean > fake_mean


def test_training_with_adversarial_term(rng):
    cfg = toy_config(lambda_ad=0.1)
    tok = Tokenizer(cfg, seed=0)
    state = TokenizerTrainState(tok, OptimizerState(lr=1e-3),
                                disc=PatchDiscriminator(channels=2, seed=1),
                                disc_opt=OptimizerState(lr=1e-3))
    batch = rng.standard_normal((2, 2, 32, 32)).astype(np.float32)
    before = state.disc.k1.data.copy()
    rep = train_tokenizer_step(state, batch, seed=0)
    assert np.isfinite(rep["disc_loss"])
    assert rep["adversarial"] > 0.0
    assert not np.array_equal(state.disc.k1.data, before)  # discriminator stepped


# ---- training ----
def test_training_reduces_reconstruction_error(rng):
    cfg = toy_config()
    tok = Tokenizer(cfg, seed=0)
    state = TokenizerTrainState(tok, OptimizerState(lr=3e-3))
    batch = rng.standard_normal((4, 2, 32, 32)).astype(np.float32)
    batch[:, :, 8:, :] = 0.0  # structured content overfits quickly
    first = None
    for _ in range(200):
        rep = train_tokenizer_step(state, batch, seed=1)
        first = first or rep
    assert rep["recon"] < 0.1 * first["recon"]


def test_pure_autoencoder_mode(rng):
    cfg = toy_config(lambda_recon=1.0, lambda_vq=0.0, lambda_ad=0.0)
    tok = Tokenizer(cfg, seed=0)
    state = TokenizerTrainState(tok, OptimizerState())
    rep = train_tokenizer_step(state, rng.standard_normal((2, 2, 32, 32)), seed=0)
    assert rep["total"] == pytest.approx(rep["recon"], rel=1e-6)


def test_training_determinism_bit_identical(rng):
    batch = rng.standard_normal((2, 2, 32, 32)).astype(np.float32)

    def run():
        tok = Tokenizer(toy_config(), seed=5)
        state = TokenizerTrainState(tok, OptimizerState(lr=1e-3))
        for _ in range(10):
            train_tokenizer_step(state, batch, seed=5)
        return tok.state_arrays()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_dead_code_reseeding(rng):
    cfg = toy_config(dead_code_steps=3)
    tok = Tokenizer(cfg, seed=0)
    state = TokenizerTrainState(tok, OptimizerState())
    batch = rng.standard_normal((2, 2, 32, 32)).astype(np.float32)
    reports = [train_tokenizer_step(state, batch, seed=0) for _ in range(5)]
    assert any(r.get("reseeded", 0) > 0 for r in reports)
    assert np.all(np.isfinite(tok.codebook.data))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf batch on purpose
def test_non_finite_loss_skips_update(rng):
    tok = Tokenizer(toy_config(), seed=0)
    state = TokenizerTrainState(tok, OptimizerState())
    before = {k: v.copy() for k, v in tok.state_arrays().items()}
    bad = np.full((1, 2, 32, 32), np.inf, dtype=np.float32)
    report = train_tokenizer_step(state, bad, seed=0)
    assert report["skipped"]
    after = tok.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_full_config_shape_trace(rng):
    # 4 s at 16 kHz -> 512x256 log spectrogram -> 2x256x256 packed ->
    # 16x16 latent -> grids over the whole scale schedule
    from mars import dsp
    from mars.cmx import plan_cmx
    from mars.tokenizer import CodecConfig, pack_waveform, tokenize

    cfg = TokenizerConfig()
    tok = Tokenizer(cfg, seed=0)
    codec = CodecConfig(dsp.StftConfig(), plan_cmx(512, 256, 256, 256), 16000, 256)
    note = dsp.Waveform(rng.uniform(-0.5, 0.5, 64000), 16000)
    packed = pack_waveform(note, codec)
    assert packed.values.shape == (2, 256, 256)
    z = tok.encode(packed.values.astype(np.float32))
    assert z.shape == (16, 16, 16)
    tm = tokenize(note, tok, codec)
    assert tm.schedule == (1, 2, 4, 8, 16)
    assert [g.shape for g in tm.grids] == [(k, k) for k in (1, 2, 4, 8, 16)]
    tm2 = tokenize(note, tok, codec)
    assert all(np.array_equal(a, b) for a, b in zip(tm.grids, tm2.grids))


def test_shared_codebook_identity(rng):
    tok = Tokenizer(toy_config(), seed=0)
    assert tok.named_parameters()["quant.codebook"] is tok.codebook
    # the same storage backs every scale: poisoning one row moves tokens at
    # every scale toward or away from it consistently
    z = Tensor(rng.standard_normal((4, 4, 8)).astype(np.float32))
    tok.codebook.data[:] = 100.0
    tok.codebook.data[7] = 0.0
    res = multiscale_quantize(z, tok.codebook, tok.cfg.schedule)
    assert all(np.all(g == 7) for g in res.token_map.grids)


# ---- token-map serialization ----
def test_token_map_roundtrip(tmp_path, rng):
    grids = [rng.integers(0, 32, (k, k)) for k in (1, 2, 4)]
    tm = MultiScaleTokenMap(grids, (1, 2, 4), 32)
    path = tmp_path / "map.toks"
    tm.save(path)
    back = MultiScaleTokenMap.load(path, 32)
    assert back.schedule == (1, 2, 4)
    assert all(np.array_equal(a, b) for a, b in zip(back.grids, tm.grids))
    assert path.read_bytes()[:8] == b"MARSTOKS"


def test_token_map_validation(rng):
    with pytest.raises(InvalidInputError):
        MultiScaleTokenMap([np.zeros((2, 2), dtype=int)], (1,), 16)
    with pytest.raises(InvalidInputError):
        MultiScaleTokenMap([np.full((1, 1), 99)], (1,), 16)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        toy_config(schedule=(1, 2))          # must end at grid/patch
    with pytest.raises(InvalidConfigError):
        toy_config(schedule=(2, 1, 4))       # not ascending
    with pytest.raises(InvalidConfigError):
        toy_config(patch=5)                  # does not divide grid
