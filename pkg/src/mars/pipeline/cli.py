"""Command-line interface. Heavy imports are deferred until after argument
parsing so --threads can pin the math libraries before numpy loads.

Exit codes: 0 success, 2 usage error, 1 failure (with a one-line
machine-parsable ``error: <category>: <message>`` on stderr).
"""
from __future__ import annotations

import argparse
import os
import sys


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help="run configuration file")
    common.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS,
                        help="override the config seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                        help="workspace directory (default: out)")
    common.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS,
                        help="cap math-library threads (1 = bit-reproducible)")

    p = argparse.ArgumentParser(
        prog="mars", parents=[common],
        description="Spectrogram-token audio generation: preprocessing, "
                    "training, sampling, and evaluation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sub.add_parser("ingest", parents=[common], help="validate a dataset manifest")
    sub.add_parser("preprocess", parents=[common], help="build the spectrogram cache")

    tp = sub.add_parser("train-tokenizer", parents=[common],
                        help="train the tokenizer stage")
    tp.add_argument("--steps", type=int, help="override train.tokenizer_steps")
    ap = sub.add_parser("train-ar", parents=[common],
                        help="train the autoregressive stage")
    ap.add_argument("--steps", type=int, help="override train.ar_steps")

    gp = sub.add_parser("generate", parents=[common], help="sample audio clips")
    gp.add_argument("-n", type=int, default=1, help="number of clips")
    gp.add_argument("--condition", default="unconditional",
                    help="class id or 'unconditional'")

    ep = sub.add_parser("evaluate", parents=[common], help="compute the metric report")
    ep.add_argument("--mode", choices=["reconstruction", "generation"],
                    default="reconstruction")

    cp = sub.add_parser("cmx", parents=[common], help="pack or unpack a tensor file")
    cp.add_argument("action", choices=["pack", "unpack"])
    cp.add_argument("input", help="input tensor file")
    cp.add_argument("output", help="output tensor file")
    cp.add_argument("--fh", type=int, default=2, help="height factor (pack)")
    cp.add_argument("--fw", type=int, default=2, help="width factor (pack)")
    cp.add_argument("--mode", choices=["interleave", "block"], default="interleave")

    ip = sub.add_parser("inspect", parents=[common], help="describe any artifact file")
    ip.add_argument("path", help="artifact to inspect")

    sp = sub.add_parser("serve", parents=[common], help="start the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8765)

    fp = sub.add_parser("make-fixtures", parents=[common],
                        help="write a synthetic demo dataset")
    fp.add_argument("--count", type=int, default=16)
    fp.add_argument("--dir", default="fixtures", help="output dataset directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "out"),
                          ("threads", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _dispatch(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # uniform one-line machine-parsable failure
        from ..errors import MarsError

        category = e.category if isinstance(e, MarsError) else "internal"
        print(f"error: {category}: {e}", file=sys.stderr)
        return 1


def _load_run(args, mutate_seed: bool = True):
    """Workspace from --config/--out. Training-style commands let --seed
    rewrite the run seed (a new run identity); sampling-style commands treat
    --seed as a free parameter so existing artifacts stay valid."""
    from .config import RunConfig, load_config
    from .cache import Workspace

    cfg = load_config(args.config) if args.config else RunConfig()
    if mutate_seed and args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    return Workspace(args.out, cfg)


def _dispatch(args) -> int:
    cmd = args.command

    if cmd == "make-fixtures":
        from .synth import build_fixture_dataset

        manifest = build_fixture_dataset(args.dir, count=args.count,
                                         seed=args.seed if args.seed is not None else 0)
        print(f"wrote {args.count} clips; manifest at {manifest}")
        return 0

    if cmd == "ingest":
        from .manifest import ingest

        ws = _load_run(args)
        m = ingest(ws.cfg.data.manifest, ws.cfg)
        counts = {s: len(m.split(s)) for s in ("train", "valid", "test")}
        print(f"ok: {len(m.records)} records {counts}")
        for w in m.warnings:
            print(f"warning: {w}")
        return 0

    if cmd == "preprocess":
        from .cache import preprocess_cache

        ws = _load_run(args)
        summary = preprocess_cache(ws)
        print(f"cache: {len(summary['written'])} written, "
              f"{len(summary['skipped'])} skipped, {len(summary['failed'])} failed")
        for rid, why in summary["failed"]:
            print(f"warning: {rid}: {why}")
        for w in summary["warnings"]:
            print(f"warning: {w}")
        return 0

    if cmd == "train-tokenizer":
        from .runs import run_train_tokenizer

        ws = _load_run(args)
        out = run_train_tokenizer(ws, steps=args.steps,
                                  progress=_print_progress("tokenizer"))
        print(f"tokenizer trained to step {out['steps']}; "
              f"final loss {out['last']['total']:.4f}")
        return 0

    if cmd == "train-ar":
        from .runs import run_train_ar

        ws = _load_run(args)
        out = run_train_ar(ws, steps=args.steps, progress=_print_progress("ar"))
        print(f"ar model trained to step {out['steps']}; "
              f"final loss {out['last']['loss']:.4f} "
              f"accuracy {out['last']['accuracy']:.3f}")
        return 0

    if cmd == "generate":
        from ..armodel import UNCONDITIONAL
        from .runs import run_generate

        ws = _load_run(args, mutate_seed=False)
        condition = UNCONDITIONAL if args.condition == "unconditional" else int(args.condition)
        seed = args.seed if args.seed is not None else ws.cfg.seed
        paths = run_generate(ws, args.n, condition, seed)
        for p in paths:
            print(p)
        return 0

    if cmd == "evaluate":
        from .runs import run_evaluate

        ws = _load_run(args, mutate_seed=False)
        report = run_evaluate(ws, args.mode)
        sys.stdout.write(report.to_text())
        return 0

    if cmd == "cmx":
        return _cmx_tool(args)

    if cmd == "inspect":
        from .inspect_tool import describe

        print(describe(args.path))
        return 0

    if cmd == "serve":
        import uvicorn

        from ..service.app import create_app

        ws = _load_run(args)
        uvicorn.run(create_app(ws), host=args.host, port=args.port)
        return 0

    raise AssertionError(f"unhandled command {cmd}")


def _print_progress(tag):
    def cb(report):
        step = report.get("step")
        if step is not None and step % 50 == 0:
            keys = ("total", "loss", "recon", "accuracy")
            shown = {k: round(report[k], 4) for k in keys if k in report}
            print(f"[{tag}] step {step}: {shown}")
    return cb


def _cmx_tool(args) -> int:
    import numpy as np

    from ..cmx import CmxDescriptor, PackedTensor, cmx_pack, cmx_unpack
    from .cache import read_tensor, write_tensor

    values, desc = read_tensor(args.input)
    if args.action == "pack":
        new_desc = CmxDescriptor(tuple(values.shape), args.fh, args.fw, args.mode)
        packed = cmx_pack(values.astype(np.float32), new_desc)
        write_tensor(args.output, packed.values, new_desc)
        print(f"packed {values.shape} -> {packed.values.shape} ({args.mode})")
    else:
        restored = cmx_unpack(PackedTensor(values, desc))
        identity = CmxDescriptor(tuple(restored.shape), 1, 1, desc.mode)
        write_tensor(args.output, restored.astype(np.float32), identity)
        print(f"unpacked {values.shape} -> {restored.shape}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
