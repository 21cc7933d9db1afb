"""Artifact inspector: identify any file the pipeline produces by its magic
bytes and dump its header fields."""
from __future__ import annotations

import json
import struct
from pathlib import Path

from ..errors import InvalidInputError


def describe(path: str | Path) -> str:
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"no such file: {p}")
    raw = p.read_bytes()
    head = raw[:8]

    if head == b"MARSCKPT":
        from ..substrate import read_checkpoint

        arrays = read_checkpoint(p)
        model = {k: v for k, v in arrays.items() if not k.startswith(("opt.", "meta."))}
        total = sum(int(v.size) for v in model.values())
        lines = [f"checkpoint: {len(model)} parameter records, {total} values"]
        if "opt.step" in arrays:
            lines.append(f"optimizer step: {int(arrays['opt.step'][0])}")
        for name, v in list(model.items())[:12]:
            lines.append(f"  {name}: {tuple(v.shape)}")
        if len(model) > 12:
            lines.append(f"  ... {len(model) - 12} more")
        return "\n".join(lines)

    if head == b"MARSCMX0":
        from .cache import tensor_from_bytes

        values, desc = tensor_from_bytes(raw)
        return ("cached tensor: shape {} ({}), factors ({}, {}), mode {}, digest ok"
                .format(tuple(values.shape), values.dtype, desc.factor_h,
                        desc.factor_w, desc.mode))

    if head == b"MARSTOKS":
        from ..tokenizer import MultiScaleTokenMap

        tm = MultiScaleTokenMap.from_bytes(raw, codebook_size=2 ** 31)
        sizes = ", ".join(f"{k}x{k}" for k in tm.schedule)
        total = sum(k * k for k in tm.schedule)
        return f"token map: schedule ({sizes}), {total} indices"

    if head == b"MARSEMBD":
        n, d = struct.unpack_from("<II", raw, 8)
        return f"embedding set: {n} x {d} float32"

    if raw[:4] == b"RIFF" and raw[8:12] == b"WAVE":
        from ..dsp import decode_wav

        w = decode_wav(raw)
        return (f"wav audio: {len(w.samples)} samples @ {w.sample_rate} Hz "
                f"({w.duration:.3f} s)")

    text = None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        pass
    if text is not None:
        stripped = text.lstrip()
        if stripped.startswith("{"):
            obj = json.loads(text)
            keys = ", ".join(sorted(obj)) if isinstance(obj, dict) else type(obj).__name__
            return f"json record: keys {keys}"
        if "=" in text:
            from .config import config_hash, from_entries, parse_entries

            try:
                cfg = from_entries(parse_entries(text))
                return f"config file: hash {config_hash(cfg)}"
            except Exception:
                return f"key-value text file: {len(text.splitlines())} lines"
    raise InvalidInputError(f"unrecognized artifact: {p}")
