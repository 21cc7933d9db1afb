"""Dataset manifest: JSON-lines records of audio clips with labels."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dsp import Waveform, decode_wav
from ..errors import InvalidInputError
from .config import RunConfig

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    pitch: int
    instrument_family: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    warnings: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self, rid: str) -> ManifestRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise InvalidInputError(f"unknown record id {rid!r}")


def ingest(manifest_path: str | Path, cfg: RunConfig) -> DatasetManifest:
    """Parse and validate a manifest; malformed lines, duplicate ids, and
    missing files are hard errors (reported with line numbers), while
    nonconforming sample rates only warn here."""
    path = Path(manifest_path)
    if not path.exists():
        raise InvalidInputError(f"manifest file not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    warnings: list[str] = []
    seen: set[str] = set()
    required = ("id", "path", "pitch", "instrument_family", "split")

    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
        missing = [k for k in required if k not in obj]
        if missing:
            raise InvalidInputError(f"{path}:{lineno}: missing fields {missing}")
        rid = str(obj["id"])
        if rid in seen:
            raise InvalidInputError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        if obj["split"] not in SPLITS:
            raise InvalidInputError(f"{path}:{lineno}: split must be one of {SPLITS}")
        pitch = int(obj["pitch"])
        family = int(obj["instrument_family"])
        if not (0 <= pitch <= 127):
            raise InvalidInputError(f"{path}:{lineno}: pitch {pitch} outside 0..127")
        if not (0 <= family < cfg.ar.condition_classes):
            raise InvalidInputError(
                f"{path}:{lineno}: instrument_family {family} outside "
                f"0..{cfg.ar.condition_classes - 1}")
        audio = root / str(obj["path"])
        if not audio.exists():
            raise InvalidInputError(f"{path}:{lineno}: audio file not found: {audio}")
        records.append(ManifestRecord(rid, str(obj["path"]), pitch, family, obj["split"]))

    want_sr = cfg.data.sample_rate
    want_len = cfg.data.clip_seconds
    for r in records:
        try:
            w = decode_wav((root / r.path).read_bytes())
        except InvalidInputError as e:
            raise InvalidInputError(f"{r.id}: {e}") from e
        if w.sample_rate != want_sr:
            warnings.append(
                f"{r.id}: sample rate {w.sample_rate} != configured {want_sr} "
                f"(policy: {cfg.data.nonconforming})")
        if abs(w.duration - want_len) > 0.25 * want_len:
            warnings.append(f"{r.id}: duration {w.duration:.2f}s far from "
                            f"configured {want_len:.2f}s")
    return DatasetManifest(root, records, warnings)


def load_record_audio(m: DatasetManifest, r: ManifestRecord, cfg: RunConfig) -> Waveform | None:
    """Decode one record's audio, applying the nonconforming-rate policy.
    Returns None when the policy says skip."""
    w = decode_wav((m.root / r.path).read_bytes())
    if w.sample_rate == cfg.data.sample_rate:
        return w
    policy = cfg.data.nonconforming
    if policy == "error":
        raise InvalidInputError(
            f"{r.id}: sample rate {w.sample_rate} != {cfg.data.sample_rate}")
    if policy == "skip":
        return None
    # linear-interpolation resampling: adequate for desk-scale material
    ratio = cfg.data.sample_rate / w.sample_rate
    n_out = int(round(len(w.samples) * ratio))
    src_t = np.arange(len(w.samples)) / w.sample_rate
    dst_t = np.arange(n_out) / cfg.data.sample_rate
    return Waveform(np.interp(dst_t, src_t, w.samples), cfg.data.sample_rate)
