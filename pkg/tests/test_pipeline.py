import json

import numpy as np
import pytest

from mars import dsp, metrics
from mars.errors import InvalidConfigError, InvalidInputError, IoError, MissingPrerequisiteError
from mars.pipeline import cli
from mars.pipeline.cache import (
    Workspace,
    load_cached_split,
    preprocess_cache,
    read_tensor,
    tensor_from_bytes,
    write_tensor,
)
from mars.pipeline.config import (
    RunConfig,
    config_hash,
    from_entries,
    load_config,
    parse_entries,
    save_config,
    to_text,
)
from mars.pipeline.manifest import ingest
from mars.pipeline.runs import run_evaluate, run_generate, run_train_ar, run_train_tokenizer
from mars.pipeline.synth import synth_note

from conftest import tiny_config


# ---- config ----
def test_config_text_roundtrip_and_hash(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    again = load_config(path)
    assert config_hash(again) == config_hash(cfg)
    assert to_text(again) == to_text(cfg)


def test_config_rejects_unknown_keys():
    with pytest.raises(InvalidConfigError, match="unknown config keys"):
        from_entries({"nonsense.key": "1"})


def test_config_parse_errors():
    with pytest.raises(InvalidConfigError, match="line 2"):
        parse_entries("a.b = 1\nbroken line\n")
    with pytest.raises(InvalidConfigError, match="duplicate"):
        parse_entries("stft.hop = 1\nstft.hop = 2\n")


def test_config_cross_module_validation():
    entries = parse_entries(to_text(RunConfig()))
    entries["ar.schedule"] = "1,2,4"
    with pytest.raises(InvalidConfigError, match="schedule"):
        from_entries(entries)
    entries = parse_entries(to_text(RunConfig()))
    entries["ar.vocab_size"] = "512"
    with pytest.raises(InvalidConfigError, match="vocab"):
        from_entries(entries)


def test_seed_changes_hash():
    a, b = RunConfig(), RunConfig(seed=1)
    assert config_hash(a) != config_hash(b)


# ---- manifest ----
def test_ingest_counts_and_splits(fixture_dataset):
    cfg = tiny_config(fixture_dataset)
    m = ingest(fixture_dataset, cfg)
    assert len(m.records) == 12
    assert {r.split for r in m.records} == {"train", "valid", "test"}
    assert not m.warnings


def test_ingest_duplicate_id(tmp_path):
    cfg = tiny_config(tmp_path / "m.jsonl")
    wav = dsp.encode_wav(synth_note(60, 0, 0, duration=0.5), 16)
    (tmp_path / "a.wav").write_bytes(wav)
    rec = {"id": "x", "path": "a.wav", "pitch": 60, "instrument_family": 0,
           "split": "train"}
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(InvalidInputError, match="duplicate id 'x'"):
        ingest(tmp_path / "m.jsonl", cfg)


def test_ingest_reports_line_numbers(tmp_path):
    cfg = tiny_config(tmp_path / "m.jsonl")
    (tmp_path / "m.jsonl").write_text('{"id": "a"}\nnot json\n')
    with pytest.raises(InvalidInputError, match=":1"):
        ingest(tmp_path / "m.jsonl", cfg)


def test_ingest_missing_file(tmp_path):
    cfg = tiny_config(tmp_path / "m.jsonl")
    rec = {"id": "x", "path": "missing.wav", "pitch": 60,
           "instrument_family": 0, "split": "train"}
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(InvalidInputError, match="not found"):
        ingest(tmp_path / "m.jsonl", cfg)


def test_ingest_warns_on_nonconforming_rate(tmp_path):
    cfg = tiny_config(tmp_path / "m.jsonl")
    w = dsp.Waveform(np.sin(np.arange(44100) * 0.05), 44100)
    (tmp_path / "hi.wav").write_bytes(dsp.encode_wav(w, 16))
    rec = {"id": "hi", "path": "hi.wav", "pitch": 60, "instrument_family": 0,
           "split": "train"}
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    m = ingest(tmp_path / "m.jsonl", cfg)
    assert any("sample rate 44100" in w for w in m.warnings)


# ---- cache ----
def test_cache_tensor_roundtrip_and_digest(tmp_path, rng):
    from mars.cmx import CmxDescriptor

    values = rng.standard_normal((2, 8, 8)).astype(np.float32)
    desc = CmxDescriptor((1, 16, 8), 2, 1)
    path = tmp_path / "t.cmx"
    write_tensor(path, values, desc)
    back, back_desc = read_tensor(path)
    assert np.array_equal(back, values)
    assert back_desc == desc
    corrupted = bytearray(path.read_bytes())
    corrupted[40] ^= 0xFF
    with pytest.raises(IoError, match="digest"):
        tensor_from_bytes(bytes(corrupted))


def test_preprocess_idempotent_and_verified(tmp_path, fixture_dataset):
    cfg = tiny_config(fixture_dataset)
    ws = Workspace(tmp_path / "ws", cfg)
    manifest = ingest(fixture_dataset, cfg)
    first = preprocess_cache(ws, manifest)
    assert len(first["written"]) == 12 and not first["failed"]
    second = preprocess_cache(ws, manifest)
    assert not second["written"] and len(second["skipped"]) == 12

    # cached bytes match a fresh recomputation bit-for-bit
    from mars.pipeline.manifest import load_record_audio
    from mars.tokenizer import pack_waveform

    stats = ws.load_stats()
    codec = cfg.codec(stats.mean, stats.std)
    rec = manifest.records[0]
    fresh = pack_waveform(load_record_audio(manifest, rec, cfg), codec)
    cached, _ = read_tensor(ws.cache_path(rec.id))
    assert np.array_equal(cached, fresh.values.astype(np.float32))

    # corrupt entry is regenerated
    path = ws.cache_path(rec.id)
    path.write_bytes(path.read_bytes()[:-8])
    third = preprocess_cache(ws, manifest)
    assert rec.id in third["written"]


def test_nonconforming_rate_policies(tmp_path):
    from mars.pipeline.manifest import load_record_audio

    wav_16k = dsp.encode_wav(synth_note(60, 0, 0, duration=0.5), 16)
    hi = dsp.Waveform(np.sin(np.arange(22050) * 0.03), 44100)
    (tmp_path / "lo.wav").write_bytes(wav_16k)
    (tmp_path / "hi.wav").write_bytes(dsp.encode_wav(hi, 16))
    lines = [
        {"id": "lo", "path": "lo.wav", "pitch": 60, "instrument_family": 0,
         "split": "train"},
        {"id": "hi", "path": "hi.wav", "pitch": 62, "instrument_family": 1,
         "split": "train"},
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(x) for x in lines) + "\n")

    def cfg_for(policy):
        entries = parse_entries(to_text(tiny_config(tmp_path / "m.jsonl")))
        entries["data.nonconforming"] = policy
        return from_entries(entries)

    skip_cfg = cfg_for("skip")
    m = ingest(tmp_path / "m.jsonl", skip_cfg)
    assert load_record_audio(m, m.by_id("hi"), skip_cfg) is None

    rs_cfg = cfg_for("resample")
    w = load_record_audio(m, m.by_id("hi"), rs_cfg)
    assert w.sample_rate == 16000
    assert abs(w.duration - hi.duration) < 0.01

    err_cfg = cfg_for("error")
    with pytest.raises(InvalidInputError, match="44100"):
        load_record_audio(m, m.by_id("hi"), err_cfg)


def test_stats_pinned_to_config_hash(tmp_path, fixture_dataset):
    cfg = tiny_config(fixture_dataset)
    ws = Workspace(tmp_path / "ws", cfg)
    preprocess_cache(ws, ingest(fixture_dataset, cfg))
    other = tiny_config(fixture_dataset, seed=9)
    ws2 = Workspace(tmp_path / "ws", other)
    with pytest.raises(InvalidInputError, match="config"):
        ws2.load_stats()


# ---- training ----
def test_paper_shape_cache_entry(trained_workspace, fixture_dataset):
    cfg = trained_workspace.cfg
    manifest = ingest(fixture_dataset, cfg)
    data, _ = load_cached_split(trained_workspace, manifest, "train")
    assert data.shape[1:] == (2, 256, 256)


def test_resume_is_bit_identical(tmp_path, fixture_dataset):
    cfg = tiny_config(fixture_dataset)
    manifest = ingest(fixture_dataset, cfg)

    ws_a = Workspace(tmp_path / "a", cfg)
    preprocess_cache(ws_a, manifest)
    run_train_tokenizer(ws_a, manifest, steps=10)

    ws_b = Workspace(tmp_path / "b", cfg)
    preprocess_cache(ws_b, manifest)
    run_train_tokenizer(ws_b, manifest, steps=5)   # interrupt at step 5
    run_train_tokenizer(ws_b, manifest, steps=10)  # resume to step 10

    from mars.substrate import read_checkpoint

    a = read_checkpoint(ws_a.checkpoint("tokenizer"))
    b = read_checkpoint(ws_b.checkpoint("tokenizer"))
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_ar_training_requires_tokenizer(tmp_path, fixture_dataset):
    cfg = tiny_config(fixture_dataset)
    ws = Workspace(tmp_path / "ws", cfg)
    preprocess_cache(ws, ingest(fixture_dataset, cfg))
    with pytest.raises(MissingPrerequisiteError, match="tokenizer checkpoint required"):
        run_train_ar(ws)


def test_training_loss_decreased(trained_workspace):
    log = trained_workspace.log_dir / "tokenizer_train.jsonl"
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert lines[-1]["total"] < lines[0]["total"]


# ---- generation ----
def test_generate_determinism_and_sidecars(trained_workspace):
    ws = trained_workspace
    paths = run_generate(ws, n=2, condition=1, seed=123)
    first = [p.read_bytes() for p in paths]
    again = run_generate(ws, n=2, condition=1, seed=123)
    assert [p.read_bytes() for p in again] == first

    meta = json.loads(paths[0].with_suffix(".json").read_text())
    assert meta["config_hash"] == ws.hash
    assert meta["condition"] == 1
    assert meta["seed"] == 123


def test_generated_duration_matches_config(trained_workspace):
    cfg = trained_workspace.cfg
    paths = run_generate(trained_workspace, n=1, condition=-1, seed=5)
    w = dsp.decode_wav(paths[0].read_bytes())
    expect = cfg.spectrogram_frames * cfg.stft.hop / cfg.data.sample_rate
    assert w.duration == pytest.approx(expect)
    assert w.duration == pytest.approx(4.096)


def test_generate_invalid_condition_lists_valid_labels(trained_workspace):
    with pytest.raises(InvalidInputError, match="valid ids are 0..10"):
        run_generate(trained_workspace, n=1, condition=42, seed=0)


def test_generated_spectrogram_non_negative(trained_workspace):
    ws = trained_workspace
    stats = ws.load_stats()
    codec = ws.cfg.codec(stats.mean, stats.std)
    from mars.pipeline.runs import load_ar, load_tokenizer
    from mars.armodel import ar_sample
    from mars.cmx import PackedTensor, cmx_unpack

    tok = load_tokenizer(ws)
    ar = load_ar(ws, tok)
    tm = ar_sample(ar, -1, seed=3)
    packed = tok.decode_tokens(tm)
    log_mag = cmx_unpack(PackedTensor(packed.astype(np.float64), ws.cfg.descriptor()))[0]
    mag = np.maximum(np.expm1(log_mag * stats.std + stats.mean), 0.0)
    assert np.all(mag >= 0)


# ---- evaluation ----
def test_evaluate_reconstruction_report(trained_workspace):
    report = run_evaluate(trained_workspace, "reconstruction")
    assert 0.0 <= report.ndb_over_k <= 1.0
    assert report.provenance["mode"] == "reconstruction"
    assert report.provenance["n_reference"] >= 3
    assert report.provenance["embedding_provider"] == "mel_stats"
    txt = trained_workspace.report_dir / "evaluate_reconstruction.txt"
    blob = json.loads(
        (trained_workspace.report_dir / "evaluate_reconstruction.json").read_text())
    assert txt.exists() and blob["mse"] == report.mse


def test_evaluate_generation_report(trained_workspace):
    report = run_evaluate(trained_workspace, "generation")
    assert report.provenance["pairing"].startswith("nearest")
    assert np.isfinite(report.fad)


def test_identity_candidate_scores_perfectly(trained_workspace, fixture_dataset):
    # test set compared against itself: every score at its ideal value
    ws = trained_workspace
    manifest = ingest(fixture_dataset, ws.cfg)
    data, _ = load_cached_split(ws, manifest, "test")
    fb = dsp.mel_filterbank(ws.cfg.mel_config())
    stats = ws.load_stats()
    from mars.pipeline.runs import _mels_from_packed

    mels = np.stack([_mels_from_packed(v, ws, stats, fb) for v in data])
    mse, mae = metrics.spectro_error(np.log1p(mels), np.log1p(mels))
    e = metrics.mel_stats_embedding(list(mels))
    assert (mse, mae) == (0.0, 0.0)
    assert metrics.kid(e, e) == 0.0
    assert metrics.frechet_distance(metrics.gaussian_stats(e),
                                    metrics.gaussian_stats(e)) == 0.0
    count, ratio, _ = metrics.ndb(e, e, k=2, seed=0)
    assert count == 0 and ratio == 0.0


def test_evaluate_without_cache_is_missing_prerequisite(tmp_path, fixture_dataset):
    ws = Workspace(tmp_path / "empty", tiny_config(fixture_dataset))
    with pytest.raises(MissingPrerequisiteError):
        run_evaluate(ws, "reconstruction")


# ---- CLI ----
def test_cli_usage_errors():
    assert cli.main([]) == 2 or cli.main([]) is None  # no command -> usage
    with pytest.raises(SystemExit) as e:
        cli.main(["definitely-not-a-command"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["generate", "--bogus"])
    assert e.value.code == 2


def test_cli_error_category_line(tmp_path, capsys, fixture_dataset):
    cfg_path = tmp_path / "run.cfg"
    save_config(tiny_config(fixture_dataset), cfg_path)
    code = cli.main(["evaluate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "nope")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: missing-prerequisite:")


def test_cli_cmx_pack_unpack_files(tmp_path, rng):
    from mars.cmx import CmxDescriptor

    values = rng.standard_normal((1, 8, 8)).astype(np.float32)
    src = tmp_path / "in.cmx"
    write_tensor(src, values, CmxDescriptor((1, 8, 8), 1, 1))
    packed = tmp_path / "packed.cmx"
    out = tmp_path / "back.cmx"
    assert cli.main(["cmx", "pack", str(src), str(packed), "--fh", "2", "--fw", "2"]) == 0
    assert cli.main(["cmx", "unpack", str(packed), str(out)]) == 0
    back, _ = read_tensor(out)
    assert np.array_equal(back, values)


def test_cli_inspect(tmp_path, capsys, trained_workspace):
    ckpt = trained_workspace.checkpoint("tokenizer")
    assert cli.main(["inspect", str(ckpt)]) == 0
    assert "checkpoint" in capsys.readouterr().out


def test_cli_ingest_and_make_fixtures(tmp_path, capsys):
    assert cli.main(["make-fixtures", "--count", "4",
                     "--dir", str(tmp_path / "fx")]) == 0
    capsys.readouterr()
    cfg = tiny_config(tmp_path / "fx" / "manifest.jsonl")
    cfg_path = tmp_path / "run.cfg"
    save_config(cfg, cfg_path)
    assert cli.main(["ingest", "--config", str(cfg_path),
                     "--out", str(tmp_path / "ws")]) == 0
    assert "4 records" in capsys.readouterr().out
