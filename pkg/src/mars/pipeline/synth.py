"""Synthetic note generator for demos and tests.

Produces harmonic notes shaped like short instrument samples (pitch,
timbre family, envelope) so the whole pipeline runs self-contained without
any external dataset.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..dsp import Waveform, encode_wav

FAMILY_COUNT = 11

# per-family timbre recipe: (harmonic count, spectral tilt, decay rate 1/s,
# attack seconds, noise floor)
_FAMILIES = [
    (10, 0.8, 0.6, 0.010, 0.002),   # 0 bass-like
    (6, 1.2, 1.2, 0.005, 0.004),    # 1 brass-like
    (12, 1.0, 0.4, 0.020, 0.002),   # 2 flute-like
    (8, 1.5, 2.0, 0.002, 0.006),    # 3 guitar-like
    (14, 0.7, 0.9, 0.008, 0.003),   # 4 keyboard-like
    (5, 2.0, 3.0, 0.001, 0.008),    # 5 mallet-like
    (9, 1.1, 0.7, 0.015, 0.002),    # 6 organ-like
    (11, 0.9, 1.5, 0.004, 0.005),   # 7 reed-like
    (13, 1.3, 0.5, 0.025, 0.001),   # 8 string-like
    (7, 1.7, 1.0, 0.006, 0.010),    # 9 synth-lead-like
    (10, 1.0, 0.8, 0.012, 0.004),   # 10 vocal-like
]


def synth_note(pitch: int, family: int, seed: int, sample_rate: int = 16000,
               duration: float = 4.0) -> Waveform:
    """One harmonic note. ``pitch`` is a MIDI number, ``family`` selects a
    timbre recipe; fully deterministic in (pitch, family, seed)."""
    family = family % FAMILY_COUNT
    n_harm, tilt, decay, attack, noise = _FAMILIES[family]
    rng = np.random.default_rng(np.random.SeedSequence([pitch, family, seed]))
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    sig = np.zeros(n)
    nyq = sample_rate / 2
    for k in range(1, n_harm + 1):
        fk = f0 * k
        if fk >= nyq * 0.95:
            break
        amp = k ** (-tilt) * (1.0 + 0.1 * rng.standard_normal())
        phase = rng.uniform(0, 2 * np.pi)
        vibrato = 1.0 + 0.002 * np.sin(2 * np.pi * 5.0 * t + phase)
        sig += amp * np.sin(2 * np.pi * fk * t * vibrato + phase)
    env = np.minimum(t / max(attack, 1e-4), 1.0) * np.exp(-decay * t)
    sig = sig * env + noise * rng.standard_normal(n) * env
    peak = np.abs(sig).max()
    if peak > 0:
        sig = 0.9 * sig / peak
    return Waveform(sig, sample_rate)


def build_fixture_dataset(out_dir: str | Path, count: int = 16, seed: int = 0,
                          sample_rate: int = 16000, duration: float = 4.0,
                          splits=(0.5, 0.25, 0.25)) -> Path:
    """Write ``count`` WAV notes plus a JSON-lines manifest; returns the
    manifest path. Splits are train/valid/test fractions."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = ("train", "valid", "test")
    bounds = np.cumsum([int(round(count * s)) for s in splits])
    lines = []
    for i in range(count):
        pitch = int(rng.integers(36, 84))
        family = int(rng.integers(0, FAMILY_COUNT))
        w = synth_note(pitch, family, seed=int(rng.integers(0, 2 ** 31)),
                       sample_rate=sample_rate, duration=duration)
        rel = f"audio/note_{i:04d}.wav"
        (out_dir / rel).write_bytes(encode_wav(w, 16))
        split = names[int(np.searchsorted(bounds, i, side="right").clip(0, 2))]
        lines.append(json.dumps({
            "id": f"note_{i:04d}", "path": rel, "pitch": pitch,
            "instrument_family": family, "split": split,
        }))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
