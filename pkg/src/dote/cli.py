"""Command-line front end: ``dote train | synth | degrade | eval``.

Exit codes: 0 success, 2 invalid input, 3 training stopped at ``max_outer``
without meeting the tolerance (the model is still written).  Every run
writes one JSON run manifest describing what was done.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version

import numpy as np

from .config import SolverConfig, load_config
from .dataio import guess_format, load_dataset, load_image, save_image
from .errors import DoteError
from .metrics import psnr, ssim
from .synthesis import sr_degrade, sr_upsample, synthesize
from .training import load_model, save_model, train

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

log = logging.getLogger("dote")


def _version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _write_run_manifest(args, command, config, outputs, started, extra=None):
    path = args.run_manifest
    if path is None:
        anchor = args.out if getattr(args, "out", None) else f"dote-{command}"
        path = anchor.rstrip("/\\") + ".run.json"
    record = {
        "command": command,
        "argv": list(args.argv),
        "config": asdict(config) if config is not None else None,
        "manifest": getattr(args, "manifest", None),
        "outputs": outputs,
        "seed": config.seed if config is not None else None,
        "wall_time": time.perf_counter() - started,
        "version": _version(),
    }
    if extra:
        record.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _output_paths(inputs, out, suffix):
    """One output per input: ``out`` itself for a single input, else files inside directory ``out``."""
    if len(inputs) == 1 and not os.path.isdir(out) and not out.endswith(os.sep):
        return [out]
    os.makedirs(out, exist_ok=True)
    paths = []
    for i, src in enumerate(inputs):
        stem, ext = os.path.splitext(os.path.basename(src))
        paths.append(os.path.join(out, f"{i:03d}_{stem}{suffix}{ext}"))
    return paths


def cmd_train(args):
    started = time.perf_counter()
    cfg = load_config(args.config) if args.config else SolverConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    dataset = load_dataset(args.manifest)
    model, report = train(dataset, cfg)
    save_model(args.out, model)
    outputs = [args.out]
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        outputs.append(args.report)
    _write_run_manifest(
        args, "train", cfg, outputs, started, {"converged": report.converged, "sweeps": len(report)}
    )
    if not report.converged:
        log.warning("training stopped after %d sweeps without meeting tol=%g", len(report), cfg.tol)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_synth(args):
    started = time.perf_counter()
    model = load_model(args.model)
    cfg = model.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    records = [load_image(p) for p in args.inputs]
    outputs = _output_paths(args.inputs, args.out, "_synth")
    results = [synthesize(model, rec.tensor, cfg) for rec in records]
    for rec, y, path in zip(records, results, outputs):
        save_image(path, y, rec.format, rec.maxval or 255)
    _write_run_manifest(args, "synth", cfg, outputs, started, {"model": args.model, "inputs": args.inputs})
    return EXIT_OK


def cmd_degrade(args):
    started = time.perf_counter()
    records = [load_image(p) for p in args.inputs]
    outputs = _output_paths(args.inputs, args.out, "_lr")
    written = []
    for rec, path in zip(records, outputs):
        lr = sr_degrade(rec.tensor, args.factor)
        save_image(path, lr, rec.format, rec.maxval or 255)
        written.append(path)
        if args.upsample:
            stem, ext = os.path.splitext(path)
            up_path = f"{stem}_up{ext}"
            save_image(up_path, np.clip(sr_upsample(lr, args.factor), 0.0, 1.0), rec.format, rec.maxval or 255)
            written.append(up_path)
    _write_run_manifest(args, "degrade", None, written, started, {"factor": args.factor})
    return EXIT_OK


def _eval_pairs(args):
    if args.manifest:
        base = os.path.dirname(os.path.abspath(args.manifest))
        pairs = []
        with open(args.manifest, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\r\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                ident, ref, test = line.split("\t")
                pairs.append((ident, os.path.join(base, ref), os.path.join(base, test)))
        return pairs
    if len(args.ref) != len(args.test):
        raise DoteError(f"{len(args.ref)} reference images but {len(args.test)} test images")
    return [(os.path.splitext(os.path.basename(r))[0], r, t) for r, t in zip(args.ref, args.test)]


def _peak_for(rec):
    return float(rec.maxval) if rec.format == "pgm" else 1.0


def _fmt(v):
    return "inf" if np.isinf(v) else f"{v:.6f}"


def cmd_eval(args):
    started = time.perf_counter()
    rows = []
    for ident, ref_path, test_path in _eval_pairs(args):
        ref = load_image(ref_path, normalize=False)
        test = load_image(test_path, normalize=False)
        if ref.tensor.shape != test.tensor.shape:
            raise DoteError(f"{ident}: reference {ref.tensor.shape} vs test {test.tensor.shape}")
        peak = args.peak if args.peak is not None else _peak_for(ref)
        p = psnr(ref.tensor, test.tensor, peak)
        s = ssim(ref.tensor / peak, test.tensor / peak)
        rows.append((ident, p, s, peak))
    if not rows:
        raise DoteError("nothing to evaluate")
    lines = ["id,psnr_db,ssim,peak"]
    lines += [f"{i},{_fmt(p)},{s:.6f},{peak:g}" for i, p, s, peak in rows]
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    peak_label = f"{rows[0][3]:g}" if len({r[3] for r in rows}) == 1 else "mixed"
    lines.append(f"mean,{_fmt(mean_p)},{mean_s:.6f},{peak_label}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        outputs.append(args.out)
    _write_run_manifest(args, "eval", None, outputs, started)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dote", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--run-manifest", help="where to write the JSON run record")
        return p

    p = common(sub.add_parser("train", help="learn Fx, Fy and W from a paired manifest"))
    p.add_argument("--manifest", required=True, help="id<TAB>source<TAB>target lines")
    p.add_argument("--config", help="key=value hyperparameter file")
    p.add_argument("--out", "--model", dest="out", required=True, help="model file to write")
    p.add_argument("--report", help="per-sweep objective CSV")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("synth", help="apply a trained model"))
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output file (one input) or directory")
    p.add_argument("--seed", type=int)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("degrade", help="bicubic downsampling"))
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--out", required=True, help="output file (one input) or directory")
    p.add_argument("--upsample", action="store_true", help="also write the LR image re-upsampled to the input grid")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_degrade)

    p = common(sub.add_parser("eval", help="PSNR / SSIM of test images against references"))
    p.add_argument("--manifest", help="id<TAB>reference<TAB>test lines")
    p.add_argument("--ref", nargs="*", default=[])
    p.add_argument("--test", nargs="*", default=[])
    p.add_argument("--peak", type=float, help="PSNR peak (default: PGM maxval, or 1.0)")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DoteError, OSError, ValueError) as exc:
        print(f"dote {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
