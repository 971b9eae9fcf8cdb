"""Command-line driver: profile, activity, prune, sweep, report.

Output directory layout (``--out``)::

    manifest.json              config, seed, versions, command line, files written
    profile.{csv,txt,json}     component table
    activity/scores.json       per-layer activity scores with provenance
    activity/heatmap*.csv|ppm  layer x state heatmap (raw, row-normalized, image)
    plans/plan_r<r>.json       pruning plan
    plans/model_r<r>.ssmw      pruned weights (.json with --weights-format text)
    sweep.{csv,txt,json}       speedup / memory table and per-cell columns
    series/*.csv               plot-ready series (latency, reduction, trade-off)

Errors go to stderr as ``error[CODE]: message`` and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .activity import ActivityScores, activity_scores, collect_activity, export_heatmap, synthetic_sequences
from .core import InputMode, ModelConfig, Variant, init_model
from .errors import ConfigError, FormatError, SSMError
from .harness import ChoiceItem, SweepResult, run_sweep
from .profiler import BenchmarkProtocol, ProfileReport, profile_report
from .pruning import PrunedVariant, apply_variant, plan_from_activity
from .weights import load_model, save_model

FORMAT_SUFFIX = {"csv": "csv", "text": "txt", "structured": "json"}
PRESETS = {
    "tiny": dict(d_model=16, d_state=16, n_layers=2, n_heads=2),
    "desk": dict(d_model=128, d_state=32, n_layers=4, n_heads=4),
    "paper": dict(d_model=768, d_state=128, n_layers=24, n_heads=8),
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmprune", description=__doc__.split("\n")[0])
    p.add_argument("--config", type=Path, help="JSON model config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny",
                   help="model size when no --config/--weights is given")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--weights", type=Path, help="load weights instead of random init")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--format", choices=sorted(FORMAT_SUFFIX), default="text")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--out", type=Path, default=Path("ssmprune-out"))
    p.add_argument("--backend", choices=["auto", "numpy", "fused"], default="auto")
    sub = p.add_subparsers(dest="command", required=True)

    def bench_flags(sp):
        sp.add_argument("--warmup", type=int, default=10)
        sp.add_argument("--iters", type=int, default=100)
        sp.add_argument("--batch", type=int, default=1)
        sp.add_argument("--no-pin", action="store_true", help="do not pin the benchmark to one CPU")

    sp = sub.add_parser("profile", help="component cost/latency table")
    sp.add_argument("--seqlens", type=_int_list, default=[64, 512, 2048])
    sp.add_argument("--modes", default="prefill,decode")
    sp.add_argument("--no-measure", action="store_true", help="cost model only")
    bench_flags(sp)

    def data_flags(sp):
        sp.add_argument("--data", type=Path, help=".npy sequences (n, L, D) or token ids (n, L)")
        sp.add_argument("--n-seqs", type=int, default=8)
        sp.add_argument("--seqlen", type=int, default=64)

    sp = sub.add_parser("activity", help="collect activity scores and heatmap")
    data_flags(sp)
    sp.add_argument("--no-render", action="store_true")

    sp = sub.add_parser("prune", help="build a plan, apply it and save the model")
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--scores", type=Path, help="activity scores.json (collected if absent)")
    sp.add_argument("--head-mode", choices=["per-state", "per-head"], default="per-state")
    sp.add_argument("--pruned-variant", choices=["sparse", "optimized"], default="optimized")
    sp.add_argument("--weights-format", choices=["binary", "text"], default="binary")
    data_flags(sp)

    sp = sub.add_parser("sweep", help="dense vs pruned over seqlens x ratios")
    sp.add_argument("--seqlens", type=_int_list, default=[64, 512, 2048, 4096, 8192, 16384])
    sp.add_argument("--ratios", type=_float_list, default=[0.1, 0.3, 0.5, 0.7, 0.9])
    sp.add_argument("--scores", type=Path)
    sp.add_argument("--head-mode", choices=["per-state", "per-head"], default="per-state")
    sp.add_argument("--pruned-variant", choices=["sparse", "optimized"], default="optimized")
    sp.add_argument("--task", type=Path, help="JSON multiple-choice items for accuracy")
    sp.add_argument("--no-memory-measure", action="store_true")
    sp.add_argument("--no-latency", action="store_true", help="cost model and fidelity only")
    bench_flags(sp)

    sp = sub.add_parser("report", help="re-render saved profile/sweep results")
    sp.add_argument("--from", dest="source", type=Path, required=True)
    return p


# ---------------------------------------------------------------------------


def _load_model(args):
    dtype = np.float32 if args.precision == "f32" else np.float64
    if args.weights:
        return load_model(args.weights).astype(dtype)
    if args.config:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = ModelConfig.from_dict(data)
    else:
        kw = dict(PRESETS[args.preset])
        if args.variant == Variant.MAMBA1.value:
            kw["n_heads"] = 1
        cfg = ModelConfig(variant=args.variant or Variant.MAMBA2, **kw)
    if args.variant and cfg.variant.value != args.variant:
        raise ConfigError("--variant conflicts with the config file")
    return init_model(cfg, seed=args.seed, dtype=dtype)


def _protocol(args) -> BenchmarkProtocol:
    return BenchmarkProtocol(n_warmup=args.warmup, n_iters=args.iters, seed=args.seed,
                             pin_cpu=not args.no_pin)


def _sequences(args, model):
    if args.data:
        try:
            data = np.load(args.data)
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read sequences from {args.data}: {exc}") from exc
        return data, {"dataset": str(args.data)}
    if model.config.input_mode is InputMode.TOKENS:
        rng = np.random.default_rng(args.seed)
        seqs = rng.integers(0, model.config.vocab_size, (args.n_seqs, args.seqlen))
    else:
        seqs = synthetic_sequences(model.config.d_model, args.n_seqs, args.seqlen, args.seed, model.dtype)
    return seqs, {"dataset": "synthetic-gaussian", "seed": args.seed,
                  "n_sequences": args.n_seqs, "seqlen": args.seqlen}


def _scores(args, model) -> ActivityScores:
    if getattr(args, "scores", None):
        return ActivityScores.load(args.scores)
    seqs, meta = _sequences(args, model)
    record = collect_activity(model, seqs, backend=args.backend, metadata=meta)
    n_heads = model.config.n_heads if model.config.variant is Variant.MAMBA2 else None
    return activity_scores(record, n_heads=n_heads)


def _write(path: Path, text: str, written: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    written.append(str(path))


def _write_rows(path: Path, rows, written: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(["" if v is None else v for v in r] for r in rows)
    written.append(str(path))


def _emit_sweep(result: SweepResult, out: Path, fmt: str, written: list) -> str:
    text = result.render(fmt)
    _write(out / f"sweep.{FORMAT_SUFFIX[fmt]}", text, written)
    if fmt != "structured":
        _write(out / "sweep.json", result.render("structured"), written)
    for name, rows in result.series().items():
        _write_rows(out / "series" / f"{name}.csv", rows, written)
    return text


def _ratio_tag(r: float) -> str:
    return f"{r:g}"


def cmd_profile(args, written):
    model = _load_model(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    report = profile_report(model, args.seqlens, args.batch, modes, protocol=_protocol(args),
                            measure=not args.no_measure, backend=args.backend, seed=args.seed)
    text = report.render(args.format)
    _write(args.out / f"profile.{FORMAT_SUFFIX[args.format]}", text, written)
    if args.format != "structured":
        _write(args.out / "profile.json", report.render("structured"), written)
    return model, text


def cmd_activity(args, written):
    model = _load_model(args)
    scores = _scores(args, model)
    path = args.out / "activity" / "scores.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    scores.save(path)
    written.append(str(path))
    paths = export_heatmap(scores, args.out / "activity", model.config.n_layers, render=not args.no_render)
    written.extend(str(p) for p in paths.values())
    lines = [f"layer {l}: " + " ".join(f"{v:.4g}" for v in scores.scores[l]) for l in scores.layers]
    return model, "\n".join(lines) + "\n"


def cmd_prune(args, written):
    model = _load_model(args)
    scores = _scores(args, model)
    plan = plan_from_activity(scores, args.ratio, args.head_mode,
                              n_heads=model.config.n_heads, variant=model.config.variant)
    tag = _ratio_tag(args.ratio)
    plan_path = args.out / "plans" / f"plan_r{tag}.json"
    plan_path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(plan_path)
    written.append(str(plan_path))
    pruned = apply_variant(model, plan, args.pruned_variant)
    suffix = "json" if args.weights_format == "text" else "ssmw"
    wpath = save_model(pruned, args.out / "plans" / f"model_r{tag}.{suffix}", args.weights_format)
    written.append(str(wpath))
    kept = ", ".join(f"L{i}:{len(lp.keep)}/{lp.n_state}" for i, lp in enumerate(plan.layers))
    return model, f"ratio {tag} kept {kept}\nplan {plan_path}\nweights {wpath}\n"


def _load_task(path: Path):
    try:
        items = json.loads(path.read_text())
        return [ChoiceItem([np.asarray(c) for c in it["choices"]], int(it["label"])) for it in items]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read task file {path}: {exc}") from exc


def cmd_sweep(args, written):
    model = _load_model(args)
    scores = ActivityScores.load(args.scores) if args.scores else None
    result = run_sweep(
        model, args.seqlens, args.ratios, _protocol(args), args.pruned_variant,
        scores=scores, batch=args.batch, task=_load_task(args.task) if args.task else None,
        measure_memory=not args.no_memory_measure, benchmark_latency=not args.no_latency,
        activity_seed=args.seed, head_mode=args.head_mode, backend=args.backend,
    )
    return model, _emit_sweep(result, args.out, args.format, written)


def cmd_report(args, written):
    src = args.source
    parts = []
    found = False
    if (src / "profile.json").exists():
        found = True
        report = ProfileReport.from_dict(json.loads((src / "profile.json").read_text()))
        text = report.render(args.format)
        _write(args.out / f"profile.{FORMAT_SUFFIX[args.format]}", text, written)
        parts.append(text)
    if (src / "sweep.json").exists():
        found = True
        result = SweepResult.from_dict(json.loads((src / "sweep.json").read_text()))
        parts.append(_emit_sweep(result, args.out, args.format, written))
    if not found:
        raise FormatError(f"no profile.json or sweep.json in {src}")
    return None, "\n".join(parts)


COMMANDS = {"profile": cmd_profile, "activity": cmd_activity, "prune": cmd_prune,
            "sweep": cmd_sweep, "report": cmd_report}


def _versions() -> dict:
    out = {"ssmprune": __version__, "python": platform.python_version(), "numpy": np.__version__}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def write_manifest(args, argv, model, written) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "precision": args.precision,
        "format": args.format,
        "config": None if model is None else model.config.to_dict(),
        "model_metadata": None if model is None else model.metadata,
        "versions": _versions(),
        "platform": platform.platform(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": written,
    }
    path = args.out / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    written: list[str] = []
    try:
        model, text = COMMANDS[args.command](args, written)
        write_manifest(args, argv, model, written)
    except SSMError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
