"""Preprocessing cache: one binary file per clip holding its normalized,
channel-multiplexed spectrogram, verified by a content digest.

Layout: magic "MARSCMX0", descriptor (five u32 + mode byte), rank, dims,
little-endian float32 values, then a sha256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..cmx import CmxDescriptor, PackedTensor
from ..errors import InvalidInputError, IoError, MissingPrerequisiteError
from ..tokenizer import pack_waveform
from .config import RunConfig, config_hash
from .manifest import DatasetManifest, ingest, load_record_audio

CACHE_MAGIC = b"MARSCMX0"


def tensor_to_bytes(values: np.ndarray, descriptor: CmxDescriptor) -> bytes:
    a = np.asarray(values, dtype="<f4")
    body = (CACHE_MAGIC + descriptor.to_bytes()
            + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
            + a.tobytes())
    return body + hashlib.sha256(body).digest()


def tensor_from_bytes(raw: bytes) -> tuple[np.ndarray, CmxDescriptor]:
    if len(raw) < 8 + 21 + 4 + 32 or raw[:8] != CACHE_MAGIC:
        raise IoError("not a cached-tensor file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IoError("cached tensor failed its content digest")
    desc = CmxDescriptor.from_bytes(raw[8:29])
    (rank,) = struct.unpack_from("<I", raw, 29)
    dims = struct.unpack_from(f"<{rank}I", raw, 33)
    count = int(np.prod(dims))
    offset = 33 + 4 * rank
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    return values.astype(np.float32), desc


def write_tensor(path: str | Path, values: np.ndarray, descriptor: CmxDescriptor) -> None:
    Path(path).write_bytes(tensor_to_bytes(values, descriptor))


def read_tensor(path: str | Path) -> tuple[np.ndarray, CmxDescriptor]:
    return tensor_from_bytes(Path(path).read_bytes())


@dataclass
class CacheStats:
    mean: float
    std: float
    config_hash: str
    count: int


class Workspace:
    """Filesystem layout of one run: cache, checkpoints, logs, generations,
    reports, all pinned to a single config hash."""

    def __init__(self, out_dir: str | Path, cfg: RunConfig):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.hash = config_hash(cfg)

    # directories
    @property
    def cache_dir(self) -> Path:
        return self.root / "cache"

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def gen_dir(self) -> Path:
        return self.root / "gen"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    @property
    def log_dir(self) -> Path:
        return self.root / "logs"

    def cache_path(self, rid: str) -> Path:
        return self.cache_dir / f"{rid}.cmx"

    @property
    def stats_path(self) -> Path:
        return self.cache_dir / "stats.json"

    def load_stats(self) -> CacheStats:
        if not self.stats_path.exists():
            raise MissingPrerequisiteError(
                "preprocessing cache missing; run the preprocess step first")
        obj = json.loads(self.stats_path.read_text())
        if obj.get("config_hash") != self.hash:
            raise InvalidInputError(
                f"cache was built with config {obj.get('config_hash')}, current is {self.hash}")
        return CacheStats(obj["mean"], obj["std"], obj["config_hash"], obj["count"])

    def checkpoint(self, stage: str) -> Path:
        return self.ckpt_dir / f"{stage}.ckpt"

    def sidecar(self, stage: str) -> Path:
        return self.ckpt_dir / f"{stage}.json"


def preprocess_cache(ws: Workspace, manifest: DatasetManifest | None = None) -> dict:
    """Build (or refresh) one cache entry per manifest record.

    Global normalization stats come from the train split; entries already on
    disk with a valid digest are skipped; every newly written entry is
    verified by unpacking and comparing against a fresh recomputation.
    Per-file failures are recorded and the run continues.
    """
    cfg = ws.cfg
    if manifest is None:
        manifest = ingest(Path(cfg.data.manifest), cfg)
    ws.cache_dir.mkdir(parents=True, exist_ok=True)

    # pass 1: normalization stats over the train split (log1p magnitudes)
    if ws.stats_path.exists():
        stats = ws.load_stats()
    else:
        from .. import dsp

        acc_sum, acc_sq, acc_n = 0.0, 0.0, 0
        frames = cfg.spectrogram_frames
        for r in manifest.split("train"):
            w = load_record_audio(manifest, r, cfg)
            if w is None:
                continue
            want = frames * cfg.stft.hop
            x = np.pad(w.samples, (0, max(0, want - len(w.samples))))[:want]
            s = dsp.magnitude(dsp.stft(dsp.Waveform(x, cfg.data.sample_rate), cfg.stft),
                              scale="log1p").values
            acc_sum += float(s.sum())
            acc_sq += float((s ** 2).sum())
            acc_n += s.size
        if acc_n == 0:
            raise MissingPrerequisiteError("no usable train-split audio for normalization")
        mean = acc_sum / acc_n
        var = max(acc_sq / acc_n - mean ** 2, 1e-12)
        stats = CacheStats(mean, float(np.sqrt(var)), ws.hash, acc_n)
        ws.stats_path.write_text(json.dumps({
            "mean": stats.mean, "std": stats.std,
            "config_hash": stats.config_hash, "count": stats.count,
        }, indent=2))

    codec = cfg.codec(stats.mean, stats.std)
    descriptor = cfg.descriptor()
    written, skipped, failed = [], [], []
    for r in manifest.records:
        path = ws.cache_path(r.id)
        if path.exists():
            try:
                read_tensor(path)
                skipped.append(r.id)
                continue
            except IoError:
                path.unlink()  # corrupt entry: regenerate
        try:
            w = load_record_audio(manifest, r, cfg)
            if w is None:
                failed.append((r.id, "skipped: nonconforming sample rate"))
                continue
            packed = pack_waveform(w, codec)
            values32 = packed.values.astype(np.float32)
            # write-time verification: unpack and compare with a fresh recompute
            again = pack_waveform(w, codec).values.astype(np.float32)
            from ..cmx import cmx_unpack, cmx_pack

            rebuilt = cmx_pack(cmx_unpack(PackedTensor(values32, descriptor)), descriptor)
            if not np.array_equal(rebuilt.values, again):
                raise IoError("cache verification failed: roundtrip mismatch")
            write_tensor(path, values32, descriptor)
            written.append(r.id)
        except Exception as e:  # per-file failure: log and continue
            failed.append((r.id, str(e)))
    return {
        "written": written,
        "skipped": skipped,
        "failed": failed,
        "stats": stats,
        "warnings": manifest.warnings,
    }


def load_cached_split(ws: Workspace, manifest: DatasetManifest, split: str) -> tuple[np.ndarray, list]:
    """Stack the cached tensors of one split -> ((N, C, H, W), records)."""
    arrs, recs = [], []
    for r in manifest.split(split):
        path = ws.cache_path(r.id)
        if not path.exists():
            continue
        values, _ = read_tensor(path)
        arrs.append(values)
        recs.append(r)
    if not arrs:
        raise MissingPrerequisiteError(f"no cache entries for split {split!r}")
    return np.stack(arrs), recs
