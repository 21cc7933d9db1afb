"""Training, generation, and evaluation runs over a workspace.

Every run is deterministic given the config seed and single-threaded math:
batch order is derived statelessly from (seed, step), checkpoints carry the
optimizer state, and each artifact records the config hash it was built
from.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import dsp, metrics
from ..armodel import ArModel, ArTrainState, UNCONDITIONAL, ar_sample, ar_train_step
from ..errors import InvalidInputError, MissingPrerequisiteError, StageError
from ..substrate import OptimizerState, read_checkpoint, write_checkpoint
from ..tokenizer import (
    MultiScaleTokenMap,
    Tokenizer,
    TokenizerTrainState,
    detokenize,
    train_tokenizer_step,
)
from .cache import Workspace, load_cached_split, write_tensor
from .manifest import DatasetManifest, ingest


# -----------------------------
# Checkpoint helpers
# -----------------------------
def _save_stage(ws: Workspace, stage: str, model, opt: OptimizerState, step: int,
                extra_arrays: dict | None = None) -> None:
    ws.ckpt_dir.mkdir(parents=True, exist_ok=True)
    arrays = model.state_arrays()
    for name, m in opt.m.items():
        arrays[f"opt.m.{name}"] = m
    for name, v in opt.v.items():
        arrays[f"opt.v.{name}"] = v
    arrays["opt.step"] = np.array([opt.step_count], dtype=np.float32)
    for key, val in (extra_arrays or {}).items():
        arrays[key] = val
    write_checkpoint(ws.checkpoint(stage), arrays)
    ws.sidecar(stage).write_text(json.dumps({
        "stage": stage, "step": step, "config_hash": ws.hash,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }, indent=2))


def _load_stage(ws: Workspace, stage: str, model, opt: OptimizerState) -> tuple[int, dict]:
    path = ws.checkpoint(stage)
    if not path.exists():
        raise MissingPrerequisiteError(f"{stage} checkpoint required: {path} not found")
    side = json.loads(ws.sidecar(stage).read_text()) if ws.sidecar(stage).exists() else {}
    if side and side.get("config_hash") != ws.hash:
        raise InvalidInputError(
            f"{stage} checkpoint was written with config {side.get('config_hash')}, "
            f"current config is {ws.hash}")
    arrays = read_checkpoint(path)
    model.load_state_arrays({k: v for k, v in arrays.items()
                             if not k.startswith(("opt.", "meta."))})
    for name in model.named_parameters():
        if f"opt.m.{name}" in arrays:
            opt.m[name] = arrays[f"opt.m.{name}"].copy()
            opt.v[name] = arrays[f"opt.v.{name}"].copy()
    if "opt.step" in arrays:
        opt.step_count = int(arrays["opt.step"][0])
    extras = {k: v for k, v in arrays.items() if k.startswith("meta.")}
    return int(side.get("step", 0)), extras


def _append_log(ws: Workspace, name: str, record: dict) -> None:
    ws.log_dir.mkdir(parents=True, exist_ok=True)
    with open(ws.log_dir / name, "a") as f:
        f.write(json.dumps(record) + "\n")


def _batch_indices(seed: int, tag: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, tag, step]))
    return rng.choice(n, size=min(batch, n), replace=n < batch)


# -----------------------------
# Training runs
# -----------------------------
def run_train_tokenizer(ws: Workspace, manifest: DatasetManifest | None = None,
                        steps: int | None = None, progress=None) -> dict:
    cfg = ws.cfg
    if manifest is None:
        manifest = ingest(Path(cfg.data.manifest), cfg)
    ws.load_stats()  # ensures the cache exists and matches this config
    data, _ = load_cached_split(ws, manifest, "train")
    total_steps = steps if steps is not None else cfg.train.tokenizer_steps

    model = Tokenizer(cfg.tokenizer, seed=cfg.seed)
    opt = OptimizerState(lr=cfg.train.tokenizer_lr)
    state = TokenizerTrainState(model, opt)
    if ws.checkpoint("tokenizer").exists():
        state.step, extras = _load_stage(ws, "tokenizer", model, opt)
        if "meta.code_last_used" in extras:
            model.code_last_used = extras["meta.code_last_used"].astype(np.int64)
            model.code_usage = extras["meta.code_usage"].astype(np.int64)

    first_report, last_report = None, None
    while state.step < total_steps:
        idx = _batch_indices(cfg.seed, 1, state.step, len(data), cfg.train.batch)
        report = train_tokenizer_step(state, data[idx], seed=cfg.seed)
        last_report = report
        first_report = first_report or report
        _append_log(ws, "tokenizer_train.jsonl", report)
        if progress:
            progress(report)
        if state.step % cfg.train.checkpoint_every == 0 or state.step >= total_steps:
            _save_stage(ws, "tokenizer", model, opt, state.step, {
                "meta.code_last_used": model.code_last_used.astype(np.float32),
                "meta.code_usage": model.code_usage.astype(np.float32),
            })
    _save_stage(ws, "tokenizer", model, opt, state.step, {
        "meta.code_last_used": model.code_last_used.astype(np.float32),
        "meta.code_usage": model.code_usage.astype(np.float32),
    })
    return {"steps": state.step, "first": first_report, "last": last_report}


def load_tokenizer(ws: Workspace) -> Tokenizer:
    model = Tokenizer(ws.cfg.tokenizer, seed=ws.cfg.seed)
    _load_stage(ws, "tokenizer", model, OptimizerState())
    return model


def _token_maps_for_split(ws: Workspace, manifest: DatasetManifest, model: Tokenizer,
                          split: str) -> list[tuple[MultiScaleTokenMap, int]]:
    data, recs = load_cached_split(ws, manifest, split)
    out = []
    for values, rec in zip(data, recs):
        out.append((model.tokens_for(values), rec.instrument_family))
    return out


def run_train_ar(ws: Workspace, manifest: DatasetManifest | None = None,
                 steps: int | None = None, progress=None) -> dict:
    cfg = ws.cfg
    if manifest is None:
        manifest = ingest(Path(cfg.data.manifest), cfg)
    tokenizer = load_tokenizer(ws)  # frozen; raises if the checkpoint is absent
    pairs = _token_maps_for_split(ws, manifest, tokenizer, "train")
    total_steps = steps if steps is not None else cfg.train.ar_steps

    model = ArModel(cfg.ar, tokenizer.codebook.data, seed=cfg.seed)
    opt = OptimizerState(lr=cfg.train.ar_lr)
    state = ArTrainState(model, opt)
    if ws.checkpoint("ar").exists():
        state.step, _ = _load_stage(ws, "ar", model, opt)

    first_report, last_report = None, None
    while state.step < total_steps:
        idx = _batch_indices(cfg.seed, 2, state.step, len(pairs), cfg.train.batch)
        report = ar_train_step(state, [pairs[i] for i in idx])
        last_report = report
        first_report = first_report or report
        _append_log(ws, "ar_train.jsonl", report)
        if progress:
            progress(report)
        if state.step % cfg.train.checkpoint_every == 0 or state.step >= total_steps:
            _save_stage(ws, "ar", model, opt, state.step)
    _save_stage(ws, "ar", model, opt, state.step)
    return {"steps": state.step, "first": first_report, "last": last_report}


def load_ar(ws: Workspace, tokenizer: Tokenizer) -> ArModel:
    model = ArModel(ws.cfg.ar, tokenizer.codebook.data, seed=ws.cfg.seed)
    _load_stage(ws, "ar", model, OptimizerState())
    return model


# -----------------------------
# Generation
# -----------------------------
def run_generate(ws: Workspace, n: int, condition: int = UNCONDITIONAL,
                 seed: int | None = None) -> list[Path]:
    """Sample n clips; writes WAV files plus sidecar metadata (and optional
    token/spectrogram intermediates) named by seed and index."""
    cfg = ws.cfg
    seed = cfg.seed if seed is None else seed
    stats = ws.load_stats()
    codec = cfg.codec(stats.mean, stats.std)
    try:
        tokenizer = load_tokenizer(ws)
        ar = load_ar(ws, tokenizer)
    except MissingPrerequisiteError:
        raise
    except Exception as e:
        raise StageError("load-checkpoints", e) from e

    ws.gen_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        seeds = np.random.SeedSequence([seed, i]).generate_state(2)
        try:
            token_map = ar_sample(ar, condition, seed=int(seeds[0]))
        except (InvalidInputError,) as e:
            raise e
        except Exception as e:
            raise StageError("sample", e) from e
        try:
            wave = detokenize(token_map, tokenizer, codec, seed=int(seeds[1]))
        except Exception as e:
            raise StageError("detokenize", e) from e
        base = ws.gen_dir / f"gen_s{seed}_{i:03d}"
        wav_path = base.with_suffix(".wav")
        wav_path.write_bytes(dsp.encode_wav(wave, cfg.generate.bit_depth))
        meta = {
            "seed": seed, "index": i, "sample_seed": int(seeds[0]),
            "phase_seed": int(seeds[1]),
            "condition": condition, "config_hash": ws.hash,
            "duration_seconds": wave.duration, "sample_rate": wave.sample_rate,
        }
        base.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        if cfg.generate.save_intermediates:
            token_map.save(base.with_suffix(".toks"))
            packed = tokenizer.decode_tokens(token_map)
            write_tensor(base.with_suffix(".cmx"), packed.astype(np.float32),
                         cfg.descriptor())
        paths.append(wav_path)
    return paths


# -----------------------------
# Evaluation
# -----------------------------
def _mels_from_packed(values: np.ndarray, ws: Workspace, stats, fb: np.ndarray) -> np.ndarray:
    from ..cmx import PackedTensor, cmx_unpack

    packed = PackedTensor(np.asarray(values, dtype=np.float64), ws.cfg.descriptor())
    log_mag = cmx_unpack(packed)[0] * stats.std + stats.mean
    return fb @ np.maximum(np.expm1(log_mag), 0.0)


def _mels_from_wave(w: dsp.Waveform, ws: Workspace, fb: np.ndarray) -> np.ndarray:
    cfg = ws.cfg
    want = cfg.spectrogram_frames * cfg.stft.hop
    x = np.pad(w.samples, (0, max(0, want - len(w.samples))))[:want]
    spec = dsp.magnitude(dsp.stft(dsp.Waveform(x, cfg.data.sample_rate), cfg.stft),
                         scale="linear")
    return fb @ spec.values


def run_evaluate(ws: Workspace, mode: str, manifest: DatasetManifest | None = None) -> metrics.MetricReport:
    """Compute the eight-score report for reconstruction or generation.

    Reconstruction pairs every test clip with its tokenizer roundtrip;
    generation compares generated clips against the test split, matching
    each to its nearest test mel for the paired errors.
    """
    cfg = ws.cfg
    if mode not in ("reconstruction", "generation"):
        raise InvalidInputError("mode must be reconstruction or generation")
    if manifest is None:
        manifest = ingest(Path(cfg.data.manifest), cfg)
    stats = ws.load_stats()
    codec = cfg.codec(stats.mean, stats.std)
    fb = dsp.mel_filterbank(cfg.mel_config())

    test_data, test_recs = load_cached_split(ws, manifest, "test")
    train_data, train_recs = load_cached_split(ws, manifest, "train")
    ref_mels = np.stack([_mels_from_packed(v, ws, stats, fb) for v in test_data])
    train_mels = np.stack([_mels_from_packed(v, ws, stats, fb) for v in train_data])

    if mode == "reconstruction":
        tokenizer = load_tokenizer(ws)
        cand_mels = []
        for i, values in enumerate(test_data):
            token_map = tokenizer.tokens_for(values)
            wave = detokenize(token_map, tokenizer, codec, seed=int(
                np.random.SeedSequence([cfg.seed, 3, i]).generate_state(1)[0]))
            cand_mels.append(_mels_from_wave(wave, ws, fb))
        cand_mels = np.stack(cand_mels)
        mse, mae = metrics.spectro_error(np.log1p(ref_mels), np.log1p(cand_mels))
        match_info = "paired"
    else:
        wavs = sorted(ws.gen_dir.glob("*.wav"))
        if not wavs:
            raise MissingPrerequisiteError("no generated audio found; run generation first")
        cand_mels = np.stack([
            _mels_from_wave(dsp.decode_wav(p.read_bytes()), ws, fb) for p in wavs])
        mse, mae, _ = metrics.nearest_neighbor_error(np.log1p(cand_mels), np.log1p(ref_mels))
        match_info = f"nearest-of-{len(ref_mels)}"

    n_min = cfg.metrics.min_distribution_samples
    if len(ref_mels) < n_min or len(cand_mels) < n_min:
        raise MissingPrerequisiteError(
            f"distribution metrics need at least {n_min} samples per set "
            f"(have {len(ref_mels)} reference, {len(cand_mels)} candidate)")

    # embedding providers
    ref_embed = metrics.mel_stats_embedding(list(ref_mels))
    cand_embed = metrics.mel_stats_embedding(list(cand_mels))
    train_embed = metrics.mel_stats_embedding(list(train_mels))

    feats_train = train_embed.vectors
    pitch_labels = np.array([r.pitch % cfg.metrics.pitch_classes for r in train_recs])
    family_labels = np.array([r.instrument_family for r in train_recs])
    pitch_clf = metrics.MiniClassifier(feats_train.shape[1], cfg.metrics.pitch_classes,
                                       cfg.metrics.classifier_hidden, seed=cfg.seed)
    pitch_acc = pitch_clf.fit(feats_train, pitch_labels, steps=cfg.metrics.classifier_steps)
    family_clf = metrics.MiniClassifier(feats_train.shape[1], cfg.ar.condition_classes,
                                        cfg.metrics.classifier_hidden, seed=cfg.seed + 1)
    family_acc = family_clf.fit(feats_train, family_labels, steps=cfg.metrics.classifier_steps)

    pis = metrics.inception_score(pitch_clf.predict_probs(cand_embed.vectors))
    iis = metrics.inception_score(family_clf.predict_probs(cand_embed.vectors))
    pkid = metrics.kid(pitch_clf.embed(ref_embed.vectors, "pitch_classifier"),
                       pitch_clf.embed(cand_embed.vectors, "pitch_classifier"))
    ikid = metrics.kid(family_clf.embed(ref_embed.vectors, "family_classifier"),
                       family_clf.embed(cand_embed.vectors, "family_classifier"))

    provider = cfg.metrics.fad_provider
    if provider.startswith("external:"):
        root = Path(provider.split(":", 1)[1])
        fad_ref = metrics.external_embedding(root / "reference.embd")
        fad_cand = metrics.external_embedding(root / "candidate.embd", fad_ref.dim)
    else:
        fad_ref, fad_cand = ref_embed, cand_embed
    fad = metrics.frechet_distance(metrics.gaussian_stats(fad_ref),
                                   metrics.gaussian_stats(fad_cand))

    k = cfg.metrics.ndb_k
    if train_embed.n < k:
        raise MissingPrerequisiteError(
            f"ndb needs at least k={k} training samples, have {train_embed.n}")
    _, ndb_over_k, _ = metrics.ndb(train_embed, cand_embed, k=k,
                                   alpha=cfg.metrics.ndb_alpha, seed=cfg.seed)

    report = metrics.MetricReport(
        ndb_over_k=ndb_over_k, pkid=pkid, ikid=ikid, pis=pis, iis=iis,
        mse=mse, mae=mae, fad=fad,
        provenance={
            "mode": mode, "config_hash": ws.hash, "seed": cfg.seed,
            "n_reference": len(ref_mels), "n_candidate": len(cand_mels),
            "n_train": train_embed.n, "pairing": match_info,
            "fad_provider": fad_ref.provider,
            "embedding_provider": "mel_stats",
            "pitch_classifier_train_acc": round(pitch_acc, 4),
            "family_classifier_train_acc": round(family_acc, 4),
            "ndb_k": k, "ndb_alpha": cfg.metrics.ndb_alpha,
        })
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    (ws.report_dir / f"evaluate_{mode}.txt").write_text(report.to_text())
    (ws.report_dir / f"evaluate_{mode}.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return report
