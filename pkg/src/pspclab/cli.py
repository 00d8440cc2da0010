"""Command line entry point: ``pspclab <command> [options]``.

Every command writes its outputs and a ``manifest.txt`` into ``--out``.

Denoiser specifications (``--denoiser``, ``--reference``, ``--candidate``)::

    optimal | optimal:topk=K | gaussian | constant:C
    square:S | square-schedule:PATH.csv
    flex:LAMBDA | flex-schedule:PATH.csv      (heatmaps from --maps, else blob surrogate)
    external:PATH.pspc                        ((T, M, H, W, C) outputs aligned to --evalset)
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import DiffusionProcess, edm_schedule, log_uniform_grid, sample_prior
from .errors import ConfigError, PSPCError
from .handles import (ConstantDenoiser, ExternalDenoiser, GaussianDenoiser, OptimalDenoiser,
                      PSPCFlexDenoiser, PSPCSquareDenoiser)
from .harness import (EvalSet, build_forward_evalset, compare_samples, mse_sweep,
                      nearest_training_distance, patch_error_sweep)
from .pspc import LambdaSchedule, SizeSchedule, tune_schedule
from .sampler import sample_euler, sample_heun
from .sensitivity import (aggregate_concentration, blob_map_source, load_external_maps,
                          nearest_map_source, sensitivity_map, write_maps)
from .tensorio import (RunManifest, emit_csv, load_dataset, make_synthetic_dataset,
                       write_tensor_file)

log = logging.getLogger("pspclab")


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _process(args):
    return DiffusionProcess(args.sigma_min, args.sigma_max, args.rho)


def _grid(args):
    """Noise levels from --grid (``edm:N`` or ``log:LO:HI:COUNT`` or a comma list)."""
    spec = args.grid
    try:
        if spec.startswith("edm:"):
            sched = edm_schedule(_process(args), int(spec[4:]))
            return list(sched.positive), sched.name
        if spec.startswith("log:"):
            lo, hi, count = spec[4:].split(":")
            return log_uniform_grid(float(lo), float(hi), int(count))[::-1], spec
        return _float_list(spec), "list"
    except ValueError as exc:
        raise ConfigError(f"bad --grid {spec!r}: {exc}") from None


def _maps_source(args, dataset):
    if getattr(args, "maps", None):
        return nearest_map_source(load_external_maps(args.maps)), "external-file"
    h, w, _ = dataset.shape
    return blob_map_source(h, w), "synthetic-blob"


def make_denoiser(spec, dataset, args=None):
    try:
        return _make_denoiser(spec, dataset, args)
    except PSPCError:
        raise
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad denoiser specification {spec!r}: {exc}") from exc


def _make_denoiser(spec, dataset, args):
    kind, _, arg = spec.partition(":")
    if kind == "optimal":
        top_k = int(arg.split("=", 1)[1]) if arg.startswith("topk=") else None
        return OptimalDenoiser(dataset, top_k)
    if kind == "gaussian":
        return GaussianDenoiser(dataset)
    if kind == "constant":
        return ConstantDenoiser(float(arg))
    if kind == "square":
        return PSPCSquareDenoiser(dataset, int(arg))
    if kind == "square-schedule":
        return PSPCSquareDenoiser(dataset, SizeSchedule.from_csv(arg))
    if kind in ("flex", "flex-schedule"):
        sched = LambdaSchedule.from_csv(arg) if kind == "flex-schedule" else float(arg)
        maps, _ = _maps_source(args, dataset)
        return PSPCFlexDenoiser(dataset, maps, sched)
    if kind == "external":
        return ExternalDenoiser(arg)
    raise ConfigError(f"unknown denoiser {spec!r}")


def _manifest(args, dataset=None, schedule="", **extra):
    items = {"command": args.command, "threads": args.threads,
             "normalization_range": "[-1,1]"}
    if getattr(args, "dataset", None):
        items["dataset"] = args.dataset
        items["normalization"] = _normalization(args)
    items.update({k: v for k, v in extra.items() if v is not None})
    return RunManifest(seed=args.seed, dataset_hash=dataset.content_hash() if dataset else "",
                       sigma_min=args.sigma_min, sigma_max=args.sigma_max, rho=args.rho,
                       schedule=schedule, extra={k: str(v) for k, v in items.items()})


def _normalization(args):
    if args.normalization:
        return args.normalization
    return "u8-to-unit" if Path(args.dataset).is_dir() else "none"


def _dataset(args):
    return load_dataset(args.dataset, _normalization(args))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, out):
    ds = _dataset(args)
    write_tensor_file(out / "dataset.pspc", ds.images)
    emit_csv({"index": list(range(len(ds.sources))),
              "path": [p for p, _ in ds.sources], "sha256": [h for _, h in ds.sources]},
             out / "sources.csv")
    log.info("ingested %r", ds)
    return _manifest(args, ds, source=args.dataset)


def cmd_synth(args, out):
    h, w, c = (int(v) for v in args.shape.split("x"))
    ds = make_synthetic_dataset(args.n, h, w, c, kind=args.kind, seed=args.seed)
    write_tensor_file(out / "dataset.pspc", ds.images)
    return _manifest(args, ds, kind=args.kind, shape=args.shape, n=args.n)


def cmd_fwd_evalset(args, out):
    ds = _dataset(args)
    ts, name = _grid(args)
    ev = build_forward_evalset(ds, ts, args.M, args.seed, schedule=name)
    ev.save(out / "evalset")
    return _manifest(args, ds, name, M=args.M, grid=args.grid)


def cmd_denoise(args, out):
    ds = _dataset(args)
    ev = EvalSet.load(args.evalset)
    handle = make_denoiser(args.denoiser, ds, args)
    outputs = np.stack([handle.evaluate(ev, k) for k in range(len(ev.ts))])
    write_tensor_file(out / "outputs.pspc", outputs, dtype=args.dtype)
    return _manifest(args, ds, ev.schedule, denoiser=handle.describe(), evalset=args.evalset)


def cmd_sample(args, out):
    ds = _dataset(args)
    proc = _process(args)
    sched = edm_schedule(proc, args.steps)
    handle = make_denoiser(args.denoiser, ds, args)
    z0 = sample_prior(ds.shape, args.count, proc.sigma_max, args.seed)
    run = sample_heun if args.solver == "heun" else sample_euler
    traj = run(handle, sched.ts, z0, capture=args.capture)
    traj.save(out / "trajectory")
    dist, idx = nearest_training_distance(ds, traj.final)
    emit_csv({"sample": list(range(dist.size)), "nearest_index": idx.tolist(),
              "max_abs_distance": dist.tolist()}, out / "nearest_training.csv")
    return _manifest(args, ds, sched.name, denoiser=handle.describe(), solver=args.solver,
                     count=args.count, denoiser_calls=traj.n_calls)


def cmd_mse_sweep(args, out):
    ds = _dataset(args)
    ev = EvalSet.load(args.evalset)
    cand = make_denoiser(args.candidate, ds, args)
    ref = make_denoiser(args.reference, ds, args)
    mse_sweep(cand, ref, ev, out / "mse.csv")
    return _manifest(args, ds, ev.schedule, candidate=cand.describe(),
                     reference=ref.describe(), evalset_source=ev.source)


def cmd_patch_sweep(args, out):
    ds = _dataset(args)
    ev = EvalSet.load(args.evalset)
    ref = make_denoiser(args.reference, ds, args)
    sizes = _int_list(args.sizes) if args.sizes else list(range(1, min(ds.shape[:2]) + 1))
    patch_error_sweep(ds, sizes, ref, ev, csv_path=out / "patch_errors.csv")
    return _manifest(args, ds, ev.schedule, reference=ref.describe(),
                     sizes=",".join(map(str, sizes)), crop_weighting="equal-per-crop",
                     evalset_source=ev.source)


def cmd_gradmap(args, out):
    ds = _dataset(args)
    ts, name = _grid(args)
    handle = make_denoiser(args.denoiser, ds, args)
    smaps = [sensitivity_map(handle, ds, t, args.samples, args.seed, method=args.method)
             for t in ts]
    write_maps(out / "maps.pspc", smaps, dtype=args.dtype)
    return _manifest(args, ds, name, denoiser=handle.describe(), samples=args.samples,
                     sensitivity_source=smaps[0].source)


def cmd_concentration(args, out):
    smaps = load_external_maps(args.maps)
    fractions = _float_list(args.fractions)
    table = {"t": [], "fraction": [], "mean_side": []}
    for sm in smaps:
        _, rows = aggregate_concentration(sm, fractions)
        for key in table:
            table[key].extend(rows[key])
    emit_csv(table, out / "concentration.csv")
    return _manifest(args, None, maps=args.maps, fractions=args.fractions)


def cmd_tune_schedule(args, out):
    ds = _dataset(args)
    ts, name = _grid(args)
    ref = make_denoiser(args.reference, ds, args)
    h, w, _ = ds.shape
    maps, maps_tag = (None, None)
    if args.kind == "size":
        cands = _int_list(args.candidates) if args.candidates else list(range(1, min(h, w) + 1, 2))
    else:
        cands = _float_list(args.candidates) if args.candidates else [i / 10 for i in range(11)]
        source, maps_tag = _maps_source(args, ds)
        maps = source
    sched, _ = tune_schedule(ds, ref, ts, cands, args.samples, args.seed, kind=args.kind,
                             objective=args.objective, maps=maps,
                             csv_path=out / "tuning_errors.csv")
    sched.to_csv(out / "schedule.csv")
    return _manifest(args, ds, name, reference=ref.describe(), kind=args.kind,
                     objective=args.objective, candidates=",".join(map(str, cands)),
                     samples_per_t=args.samples, sensitivity_source=maps_tag)


def cmd_compare_samples(args, out):
    ds = _dataset(args)
    proc = _process(args)
    sched = edm_schedule(proc, args.steps)
    handles = {spec: make_denoiser(spec, ds, args) for spec in args.denoisers}
    z0 = sample_prior(ds.shape, args.count, proc.sigma_max, args.seed)
    compare_samples(handles, sched.ts, z0, ds, out, solver=args.solver)
    return _manifest(args, ds, sched.name, denoisers=";".join(args.denoisers),
                     solver=args.solver, count=args.count)


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "fwd-evalset": cmd_fwd_evalset,
    "denoise": cmd_denoise,
    "sample": cmd_sample,
    "mse-sweep": cmd_mse_sweep,
    "patch-sweep": cmd_patch_sweep,
    "gradmap": cmd_gradmap,
    "concentration": cmd_concentration,
    "tune-schedule": cmd_tune_schedule,
    "compare-samples": cmd_compare_samples,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("--sigma-min", type=float, default=0.002)
    common.add_argument("--sigma-max", type=float, default=80.0)
    common.add_argument("--rho", type=float, default=7.0)
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", required=True, help="image directory or (N,H,W,C) tensor file")
    data.add_argument("--normalization", default=None, choices=["none", "u8-to-unit"],
                      help="default: u8-to-unit for image directories, none for tensor files")
    data.add_argument("--maps", help="heatmap tensor for flex denoisers")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--grid", default="edm:18", help="edm:N, log:LO:HI:COUNT or t1,t2,...")

    p = argparse.ArgumentParser(prog="pspclab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common, data], help="load and normalize a dataset")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--kind", choices=["smooth", "binary"], default="smooth")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--shape", default="8x8x1", help="HxWxC")

    s = sub.add_parser("fwd-evalset", parents=[common, data, grid])
    s.add_argument("--M", type=int, default=256)

    s = sub.add_parser("denoise", parents=[common, data])
    s.add_argument("--evalset", required=True)
    s.add_argument("--denoiser", default="optimal")
    s.add_argument("--dtype", choices=["f32", "f64"], default="f64")

    s = sub.add_parser("sample", parents=[common, data])
    s.add_argument("--denoiser", default="optimal")
    s.add_argument("--solver", choices=["euler", "heun"], default="heun")
    s.add_argument("--steps", type=int, default=18)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--capture", action="store_true", help="store every step")

    s = sub.add_parser("mse-sweep", parents=[common, data])
    s.add_argument("--evalset", required=True)
    s.add_argument("--candidate", required=True)
    s.add_argument("--reference", default="optimal")

    s = sub.add_parser("patch-sweep", parents=[common, data])
    s.add_argument("--evalset", required=True)
    s.add_argument("--reference", default="optimal")
    s.add_argument("--sizes", default="", help="comma list; default 1..min(H, W)")

    s = sub.add_parser("gradmap", parents=[common, data, grid])
    s.add_argument("--denoiser", default="optimal")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--method", choices=["analytic", "finite-difference"], default=None)
    s.add_argument("--dtype", choices=["f32", "f64"], default="f64")

    s = sub.add_parser("concentration", parents=[common])
    s.add_argument("--maps", required=True)
    s.add_argument("--fractions", default="0.5,0.75,0.95")

    s = sub.add_parser("tune-schedule", parents=[common, data, grid])
    s.add_argument("--reference", default="optimal")
    s.add_argument("--kind", choices=["size", "lambda"], default="size")
    s.add_argument("--objective", choices=["patch", "composite"], default="patch")
    s.add_argument("--candidates", default="")
    s.add_argument("--samples", type=int, default=256)

    s = sub.add_parser("compare-samples", parents=[common, data])
    s.add_argument("--denoisers", nargs="+", required=True)
    s.add_argument("--solver", choices=["euler", "heun"], default="heun")
    s.add_argument("--steps", type=int, default=18)
    s.add_argument("--count", type=int, default=16)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limit = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            manifest = COMMANDS[args.command](args, out)
    except PSPCError as exc:
        print(f"pspclab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    manifest.write(out / "manifest.txt")
    return 0


if __name__ == "__main__":
    sys.exit(main())
