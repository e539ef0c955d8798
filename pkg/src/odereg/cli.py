"""Command-line entry point: synth, fit, predict, evaluate, gradcheck.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import SynthSpec, read_grid, read_manifest, synth_sequence, write_grid, write_manifest
from .errors import FormatError
from .grid import fold_percentage
from .model import load_checkpoint, save_checkpoint
from .objective import LossWeights, nrmse, psnr, ssim
from .odeint import SolverConfig
from .train import DivergenceError, FitConfig, fit, predict


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# ---------------------------------------------------------------------------
# run config

_SOLVER_KEYS = {"method", "steps_per_unit_time", "rtol", "atol"}
_WEIGHT_KEYS = {"lambda1", "lambda2"}
_PATH_KEYS = {"manifest", "out_model", "log"}


def _fit_keys() -> set[str]:
    return {f.name for f in fields(FitConfig)} - {"solver", "weights"}


def load_run_config(path) -> tuple[FitConfig, dict]:
    """Parse a flat RunConfig JSON document into a FitConfig plus its path entries."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    allowed = _fit_keys() | _SOLVER_KEYS | _WEIGHT_KEYS | _PATH_KEYS
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        solver = SolverConfig(**{k: doc[k] for k in _SOLVER_KEYS if k in doc})
        weights = LossWeights(**{k: float(doc[k]) for k in _WEIGHT_KEYS if k in doc})
        kwargs = {k: doc[k] for k in _fit_keys() if k in doc}
        if "channels" in kwargs:
            kwargs["channels"] = tuple(kwargs["channels"])
        cfg = FitConfig(solver=solver, weights=weights, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg, {k: doc[k] for k in _PATH_KEYS if k in doc}


# ---------------------------------------------------------------------------
# commands


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from exc


def time_tag(t: float) -> str:
    return f"{t:.4f}"


def cmd_synth(args) -> int:
    size = tuple(int(v) for v in _parse_floats(args.size, "--size"))
    spec = SynthSpec(args.kind, size, args.frames, args.magnitude, args.noise, args.seed)
    dataset, disps = synth_sequence(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (img, t) in enumerate(zip(dataset.images, dataset.raw_times)):
        name = f"frame_{k:03d}.ndgr"
        write_grid(img, out / name, vector=False)
        entries.append((name, t))
        if k > 0:
            write_grid(disps[k], out / f"truth_{k:03d}.ndgr", vector=True)
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} frames, {len(entries) - 1} ground-truth fields and manifest.json to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg, paths = load_run_config(args.config)
    manifest = args.manifest or paths.get("manifest")
    out_model = args.out_model or paths.get("out_model")
    log_path = args.log or paths.get("log")
    if not manifest or not out_model:
        raise UsageError("fit needs --manifest and --out-model (flags or config)")
    dataset = read_manifest(manifest)
    report = fit(dataset, cfg)
    save_checkpoint(report.final_model, out_model)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            for epoch, b in enumerate(report.loss_history):
                fh.write(json.dumps({"epoch": epoch, **b.to_json()}) + "\n")
    last = report.loss_history[-1]
    print(f"fit {cfg.epochs} epochs in {report.wall_time:.1f}s; final loss {last.total:.6g}; model -> {out_model}")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    baseline = read_grid(args.baseline)
    times = _parse_floats(args.times, "--times")
    if not times:
        raise UsageError("--times must list at least one time")
    bad = [t for t in times if not 0.0 <= t <= 1.0]
    if bad:
        print(f"error: times outside [0, 1]: {bad}", file=sys.stderr)
        return 1
    order = sorted(set(times))
    results = dict(zip(order, predict(model, baseline, order)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in order:
        img, disp = results[t]
        write_grid(img, out / f"image_t{time_tag(t)}.ndgr", vector=False)
        write_grid(disp, out / f"disp_t{time_tag(t)}.ndgr", vector=True)
    print(f"wrote {len(order)} predictions to {out}")
    return 0


# published reference figures (3-D MRI, full scale); annotations only
REFERENCE_VALUES = {
    "note": "published figures on real 3-D MRI sequences; not comparable to synthetic desk-scale runs",
    "ADNI": {"nrmse": 0.159, "ssim": 0.842, "psnr": 28.673, "fold_pct": 1.8e-3},
    "ACDC": {"nrmse": 0.283, "ssim": 0.712, "psnr": 25.547, "fold_pct": 2.3e-3},
}
METRIC_COLUMNS = ("nrmse", "ssim", "psnr", "fold_pct")
_PRED_RE = re.compile(r"^image_t(\d+\.\d{4})\.ndgr$")


def evaluate_predictions(pred_dir, ref_manifest) -> dict:
    """Per-frame metrics of predictions against a reference manifest.

    Raises ``LookupError`` listing reference times that have no prediction.
    """
    dataset = read_manifest(ref_manifest)
    pred_dir = Path(pred_dir)
    available = {m.group(1) for p in pred_dir.iterdir() if (m := _PRED_RE.match(p.name))}
    wanted = [time_tag(t) for t in dataset.times]
    missing = [tag for tag in wanted if tag not in available]
    if missing:
        raise LookupError(f"no prediction for reference time(s): {', '.join(missing)}")

    rows = []
    for tag, ref in zip(wanted, dataset.images):
        pred = read_grid(pred_dir / f"image_t{tag}.ndgr")
        row = {
            "time": float(tag),
            "nrmse": nrmse(pred, ref),
            "ssim": ssim(pred, ref),
            "psnr": psnr(pred, ref),
            "fold_pct": None,
        }
        disp_path = pred_dir / f"disp_t{tag}.ndgr"
        if disp_path.exists():
            row["fold_pct"] = 100.0 * fold_percentage(read_grid(disp_path).astype(np.float64))
        rows.append(row)
    means = {}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in rows if r[col] is not None]
        means[col] = float(np.mean(vals)) if vals else None
    return {"columns": list(METRIC_COLUMNS), "frames": rows, "mean": means, "reference": REFERENCE_VALUES}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.2e}"


def cmd_evaluate(args) -> int:
    try:
        report = evaluate_predictions(args.pred_dir, args.ref_manifest)
    except LookupError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    print(f"{'time':>8} {'NRMSE':>10} {'SSIM':>10} {'PSNR':>10} {'%folds':>10}")
    for r in report["frames"]:
        print(f"{r['time']:>8.4f} " + " ".join(f"{_fmt(r[c]):>10}" for c in METRIC_COLUMNS))
    print(f"{'mean':>8} " + " ".join(f"{_fmt(report['mean'][c]):>10}" for c in METRIC_COLUMNS))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, allow_nan=True) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run(seed=args.seed, size=args.size, corrupt_vjp=args.corrupt_vjp)
    for name, err in result.errors.items():
        print(f"{name}: max relative error {err:.3e}")
    if not result.passed:
        print(f"gradcheck FAILED: worst {result.worst}", file=sys.stderr)
        return 1
    print(f"gradcheck passed (tolerance {result.tolerance:g})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odereg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic image sequence")
    p.add_argument("--kind", required=True, choices=["translate-disk", "scale-disk", "contract-ring"])
    p.add_argument("--size", required=True, help="grid extent per axis, e.g. 64,64")
    p.add_argument("--frames", required=True, type=int)
    p.add_argument("--magnitude", required=True, type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a velocity model to a sequence")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out-model")
    p.add_argument("--log", help="per-epoch loss history (JSON lines)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict images at normalized times")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--times", required=True, help="comma-separated times in [0, 1]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a reference manifest")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-manifest", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify adjoint gradients on a tiny random model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--corrupt-vjp", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FormatError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
