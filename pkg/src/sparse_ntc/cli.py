"""Command-line entry point: ``sparse-ntc {complete,synth,image,bench}``."""
from __future__ import annotations

import argparse
import csv
import statistics
import sys
from pathlib import Path

import numpy as np

from . import io
from .ao import AoConfig, MetricsRecord, ao_ntc
from .tensor import FactorSet, SparseTensor

METRIC_COLUMNS = ["epoch", "objective", "rel_error", "wall_seconds", "entries_accessed"]
BENCH_COLUMNS = ["threads", "rank", "trial", "seconds_per_epoch", "speedup_vs_1thread"]


class CliError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _dims(text: str) -> tuple[int, ...]:
    sep = "x" if "x" in text else ","
    try:
        return tuple(int(v) for v in text.split(sep))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dims like 50x60x70, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-ntc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def solver_flags(p, epochs=100.0, c=1.0, rank="10", lam=1e-3):
        p.add_argument("--output-dir", type=Path, default=Path("ntc_out"))
        p.add_argument("--rank", default=rank, help="CPD rank (comma list for bench)")
        p.add_argument("--lambda", dest="lam", type=float, default=lam)
        p.add_argument("--c", type=float, default=c, help="per-row sampling fraction")
        p.add_argument("--max-inner", type=int, default=1)
        p.add_argument("--epochs", type=float, default=epochs)
        p.add_argument("--term-tol", type=float, default=0.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", default="1", help="worker threads (comma list for bench)")
        p.add_argument("--chunksize", type=int, default=None)

    p = sub.add_parser("complete", help="complete a .tns tensor")
    p.add_argument("--input", type=Path, required=True)
    solver_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic tensor and complete it")
    p.add_argument("--dims", type=_dims, default=(50, 60, 70))
    p.add_argument("--true-rank", type=int, default=None, help="rank of the ground truth (default --rank)")
    p.add_argument("--density", type=float, default=None)
    p.add_argument("--pattern-from", type=Path, default=None, help=".tns whose support is reused")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--snr", type=float, default=None, help="calibrate the noise level to this SNR on the observed cells")
    p.add_argument("--no-complete", action="store_true")
    solver_flags(p)

    p = sub.add_parser("image", help="restore a corrupted PPM image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--keep-fraction", type=float, default=1.0)
    solver_flags(p, epochs=500.0, c=0.02, rank="50")

    p = sub.add_parser("bench", help="time epochs versus thread count")
    p.add_argument("--input", type=Path, default=None, help=".tns input (default: synthetic)")
    p.add_argument("--dims", type=_dims, default=(100, 100, 100))
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--true-rank", type=int, default=10)
    p.add_argument("--trials", type=int, default=5)
    solver_flags(p, epochs=1.0, c=0.5, rank="10,30,50")
    return parser


def _single(value: str, name: str) -> int:
    vals = _int_list(value)
    if len(vals) != 1:
        raise CliError(f"--{name} takes a single value for this command")
    return vals[0]


def _ao_config(args, rank: int, threads: int) -> AoConfig:
    try:
        return AoConfig(
            rank=rank, lam=args.lam, c=args.c, max_inner=args.max_inner,
            max_epochs=args.epochs, term_tol=args.term_tol, seed=args.seed,
            threads=threads, chunksize=args.chunksize,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _preamble(fh, items: dict):
    for key, val in items.items():
        fh.write(f"# {key}={val}\n")


def _config_items(command: str, cfg: AoConfig) -> dict:
    items = {"command": command}
    items.update({("lambda" if k == "lam" else k): v for k, v in cfg.as_dict().items()})
    return items


def write_metrics(path: Path, preamble: dict, history: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        _preamble(fh, preamble)
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in history:
            writer.writerow([repr(getattr(rec, c)) for c in METRIC_COLUMNS])


def read_csv(path) -> tuple[dict, list[dict]]:
    """Parse a CSV written by this tool into (preamble, rows)."""
    preamble, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                preamble[key] = val
            else:
                lines.append(line)
    return preamble, list(csv.DictReader(lines))


def _run(tensor: SparseTensor, cfg: AoConfig, init: FactorSet | None = None):
    if init is None:
        init = FactorSet.random(tensor.dims, cfg.rank, seed=cfg.seed)
    return ao_ntc(tensor, init, cfg)


def cmd_complete(args) -> int:
    cfg = _ao_config(args, _single(args.rank, "rank"), _single(args.threads, "threads"))
    if not args.input.exists():
        raise CliError(f"input file not found: {args.input}")
    tensor = io.read_tns(args.input)
    factors, history = _run(tensor, cfg)
    out = args.output_dir
    io.write_factors(factors, out)
    pre = _config_items("complete", cfg)
    pre.update(input=args.input, dims="x".join(map(str, tensor.dims)), nnz=tensor.nnz)
    write_metrics(out / "metrics.csv", pre, history)
    print(f"epochs={history[-1].epoch:.3f} rel_error={history[-1].rel_error:.6g} -> {out}")
    return 0


def cmd_synth(args) -> int:
    rank = _single(args.rank, "rank")
    cfg = _ao_config(args, rank, _single(args.threads, "threads"))
    true_rank = args.true_rank or rank
    if args.snr is not None and args.noise_sigma:
        raise CliError("give at most one of --noise-sigma and --snr")
    density = args.density
    if density is None and args.pattern_from is None:
        density = 0.1
    try:
        spec = io.SynthSpec(
            dims=args.dims, rank=true_rank, noise_sigma=args.noise_sigma, density=density,
            pattern_from=args.pattern_from, seed=args.seed, target_snr=args.snr,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    observed, truth, achieved, n_clamped, sigma = io.synth_generate(spec)
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    io.write_tns(observed, out / "observed.tns")
    io.write_factors(truth, out / "truth")
    pre = _config_items("synth", cfg)
    pre.update(
        dims="x".join(map(str, spec.dims)), true_rank=true_rank, density=density,
        pattern_from=args.pattern_from, noise_sigma=sigma, nnz=observed.nnz,
        achieved_snr=achieved, n_clamped=n_clamped,
    )
    history = []
    if not args.no_complete:
        factors, history = _run(observed, cfg)
        io.write_factors(factors, out)
    write_metrics(out / "metrics.csv", pre, history)
    msg = f"nnz={observed.nnz} snr={achieved:.6g} clamped={n_clamped}"
    if history:
        msg += f" rel_error={history[-1].rel_error:.6g}"
    print(msg)
    return 0


def cmd_image(args) -> int:
    cfg = _ao_config(args, _single(args.rank, "rank"), _single(args.threads, "threads"))
    if not 0 < args.keep_fraction <= 1:
        raise CliError(f"--keep-fraction must be in (0, 1], got {args.keep_fraction}")
    if not args.input.exists():
        raise CliError(f"input file not found: {args.input}")
    full = io.image_to_tensor(args.input)
    observed = io.corrupt(full, args.keep_fraction, seed=args.seed)
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    io.tensor_to_image(observed, out / "corrupted.ppm")
    factors, history = _run(observed, cfg)
    io.factors_to_image(factors, out / "restored.ppm")
    original = full.vals
    restored = io.image_to_tensor(out / "restored.ppm").vals
    baseline = io.image_to_tensor(out / "corrupted.ppm").vals
    denom = float(np.linalg.norm(original)) or 1.0
    restored_err = float(np.linalg.norm(restored - original)) / denom
    baseline_err = float(np.linalg.norm(baseline - original)) / denom
    pre = _config_items("image", cfg)
    pre.update(
        input=args.input, dims="x".join(map(str, full.dims)), keep_fraction=args.keep_fraction,
        nnz=observed.nnz, restored_full_rel_error=restored_err,
        corrupted_full_rel_error=baseline_err,
    )
    write_metrics(out / "metrics.csv", pre, history)
    print(f"observed rel_error={history[-1].rel_error:.6g} "
          f"full-image error restored={restored_err:.6g} corrupted={baseline_err:.6g}")
    return 0


def _bench_tensor(args) -> SparseTensor:
    if args.input is not None:
        if not args.input.exists():
            raise CliError(f"input file not found: {args.input}")
        return io.read_tns(args.input)
    spec = io.SynthSpec(dims=args.dims, rank=args.true_rank, density=args.density, seed=args.seed)
    return io.synth_generate(spec).observed


def time_epochs(tensor: SparseTensor, cfg: AoConfig) -> float:
    """Solver seconds per epoch, metrics evaluation excluded."""
    init = FactorSet.random(tensor.dims, cfg.rank, seed=cfg.seed)
    _, history = ao_ntc(tensor, init, cfg, track_metrics=False)
    last = history[-1]
    return last.wall_seconds / last.epoch


def cmd_bench(args) -> int:
    ranks = _int_list(args.rank)
    threads = _int_list(args.threads)
    if args.trials < 1:
        raise CliError(f"--trials must be positive, got {args.trials}")
    if 1 not in threads:
        threads = [1] + threads
    configs = {(t, r): _ao_config(args, r, t) for r in ranks for t in threads}
    tensor = _bench_tensor(args)
    rows = []
    for r in ranks:
        # compile and warm caches outside the timed region
        warm = _ao_config(args, r, 1)
        time_epochs(tensor, warm)
        times = {}
        for t in threads:
            cfg = configs[(t, r)]
            times[t] = [time_epochs(tensor, cfg) for _ in range(args.trials)]
        base = statistics.fmean(times[1])
        for t in threads:
            for k, sec in enumerate(times[t]):
                rows.append([t, r, k, sec, base / sec])
            mean = statistics.fmean(times[t])
            rows.append([t, r, "mean", mean, base / mean])
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    pre = {"command": "bench", "seed": args.seed, "c": args.c, "lambda": args.lam,
           "rank": ",".join(map(str, ranks)), "max_inner": args.max_inner,
           "threads": ",".join(map(str, threads)), "epochs": args.epochs,
           "trials": args.trials, "dims": "x".join(map(str, tensor.dims)), "nnz": tensor.nnz,
           "input": args.input}
    with open(out / "bench.csv", "w", newline="") as fh:
        _preamble(fh, pre)
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    for row in rows:
        if row[2] == "mean":
            print(f"rank={row[1]} threads={row[0]} s/epoch={row[3]:.4g} speedup={row[4]:.3g}")
    return 0


COMMANDS = {"complete": cmd_complete, "synth": cmd_synth, "image": cmd_image, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"sparse-ntc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
