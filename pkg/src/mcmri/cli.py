"""``mcmri`` command line.

Every subcommand creates its output directory first, writes
``manifest.json`` there, and exits with 0 on success, 1 on invalid input or
configuration and 2 when a solver or training run goes non-finite.

Options can also come from a JSON file given with ``--config``.  Keys are
option names with dashes replaced by underscores.  Flags given on the
command line win.  A previous run's ``manifest.json`` is accepted too, so
``mcmri train --config run/manifest.json`` repeats that run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, experiments, fcsa, gradcheck, io, kspace, metrics
from .imaging import AugmentationPolicy, IngestionError, load_dataset
from .models import KINDS, ModelSpec, ModelSpecError, build_model, count_params, count_params_closed_form
from .models import forward_reconstruct, load_checkpoint, save_checkpoint
from .training import NumericalAbort, TrainConfig, simulate, train, write_manifest, xavier_init

logger = logging.getLogger("mcmri")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ options


def _common(p):
    p.add_argument("--config", help="JSON file of option defaults (or a previous manifest.json)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="root seed, split as in mcmri.experiments")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p):
    p.add_argument("--data", help="dataset root containing manifest.json")
    p.add_argument("--phantom", action="store_true", help="generate phantom slices instead of --data")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--size", type=int, default=64, help="phantom edge length")
    p.add_argument("--contrasts", type=int, default=3)


def _mask_opts(p):
    p.add_argument("--mask-kind", choices=("cartesian1d", "random2d"), default="cartesian1d")
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--center-fraction", type=float, default=0.04)
    p.add_argument("--masks", help="directory of mask_<i>.msk files overriding the mask flags")


def _train_opts(p):
    p.add_argument("--model", type=str.upper, choices=KINDS, default="DISN")
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--lam", type=float, default=kspace.DEFAULT_LAMBDA)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--no-flips", action="store_true")
    p.add_argument("--no-rotations", action="store_true")
    p.add_argument("--shift-max", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)


def _fcsa_opts(p):
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--outer-iters", type=int, default=50)
    p.add_argument("--tv-inner-iters", type=int, default=10)
    p.add_argument("--wavelet", choices=("haar", "db4"), default="haar")
    p.add_argument("--levels", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mcmri", description="Multi-contrast CS-MRI reconstruction toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("masks", help="generate sampling masks")
    _common(p)
    p.add_argument("--kind", choices=("cartesian1d", "random2d"), default="cartesian1d")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--center-fraction", type=float, default=0.04)
    p.add_argument("--count", type=int, default=1, help="number of masks (one per contrast)")

    p = sub.add_parser("phantom", help="write a synthetic multi-contrast dataset")
    _common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--contrasts", type=int, default=3)
    p.add_argument("--format", choices=("png", "f32"), default="f32")

    p = sub.add_parser("train", help="train a network")
    _common(p)
    _data_opts(p)
    _mask_opts(p)
    _train_opts(p)

    p = sub.add_parser("reconstruct", help="reconstruct test slices and score them")
    _common(p)
    _data_opts(p)
    _mask_opts(p)
    _fcsa_opts(p)
    p.add_argument("--checkpoint", help="trained network for the deep method")
    p.add_argument("--method", action="append", choices=("zero-fill", "fcsa-mt", "deep"),
                   help="repeatable; default zero-fill plus fcsa-mt, plus deep when a checkpoint is given")
    p.add_argument("--full-sampling", action="store_true", help="simulate with every coefficient sampled")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=0, help="only the first N slices (0 = all)")

    p = sub.add_parser("benchmark", help="time the forward pass")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--model", type=str.upper, choices=KINDS, default="DISN")
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--contrasts", type=int, default=3)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--budget", type=float, default=2.0, help="seconds per slice to compare against")

    p = sub.add_parser("shift-experiment", help="PSNR vs misregistration of one contrast")
    _common(p)
    _data_opts(p)
    _mask_opts(p)
    _train_opts(p)
    _fcsa_opts(p)
    p.add_argument("--shift-range", type=int, default=2)
    p.add_argument("--shifted-contrast", type=int, default=1)
    p.set_defaults(shift_max=2)

    p = sub.add_parser("block-sweep", help="PSNR vs number of blocks")
    _common(p)
    _data_opts(p)
    _mask_opts(p)
    _train_opts(p)
    p.add_argument("--blocks-list", type=int, nargs="+", default=[1, 2, 3])

    p = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine")
    p.add_argument("--config")
    p.add_argument("--out", help="optional output directory for the table and manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-network", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            ap.error(f"cannot read config {args.config}: {exc}")
        cfg = cfg.get("args", cfg)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known - {"command"}
        if unknown:
            ap.error(f"unknown config keys: {sorted(unknown)}")
        cfg = {k: v for k, v in cfg.items() if k not in ("command", "config", "out")}
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


# --------------------------------------------------------------- helpers


def _start(args) -> Path | None:
    if getattr(args, "out", None) is None:
        return None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _manifest(out: Path | None, args, **fields):
    if out is None:
        return
    write_manifest(out / "manifest.json", version=__version__, command=args.command, args=vars(args), **fields)


def _check_data_flags(args):
    if bool(args.data) == bool(args.phantom):
        raise UsageError("give exactly one of --data or --phantom")


def _dataset(args, seeds):
    if args.phantom:
        return experiments.phantom_dataset(args.n_train, args.n_test, args.size, args.contrasts, seeds.data)
    return load_dataset(args.data)


def _masks(args, shape):
    L, H, W = shape
    if args.masks:
        masks = [io.read_mask_binary(Path(args.masks) / f"mask_{i}.msk") for i in range(L)]
        if any(m.shape != (H, W) for m in masks):
            raise UsageError(f"masks in {args.masks} do not match image size {H}x{W}")
        return masks
    # spawned children are prefix-stable, so this agrees with seeds.masks
    mseeds = experiments.derive_seeds(args.seed, L).masks
    return experiments.make_masks(args.mask_kind, H, W, args.ratio, args.center_fraction, mseeds)


def _train_cfg(args, seeds) -> TrainConfig:
    cfg = TrainConfig(
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=seeds.train,
        augmentation=AugmentationPolicy(not args.no_flips, not args.no_rotations, args.shift_max),
        checkpoint_every=args.checkpoint_every,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _fcsa_cfg(args) -> fcsa.FcsaConfig:
    return fcsa.FcsaConfig(args.alpha, args.beta, args.outer_iters, args.tv_inner_iters, args.wavelet, args.levels)


def _spec(kind, blocks, contrasts, lam=kspace.DEFAULT_LAMBDA) -> ModelSpec:
    spec = ModelSpec(kind, blocks, contrasts=contrasts, lam=lam)
    try:
        spec.validate()
    except ModelSpecError as exc:
        raise UsageError(str(exc)) from exc
    return spec


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _save_masks(out, masks):
    for i, m in enumerate(masks):
        io.write_mask_binary(out / f"mask_{i}.msk", m)
        io.write_mask_png(out / f"mask_{i}.png", m)


# -------------------------------------------------------------- commands


def cmd_masks(args, out):
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(args.seed).spawn(args.count)]
    try:
        masks = [kspace.make_mask(args.kind, args.height, args.width, args.ratio, args.center_fraction, seed=s)
                 for s in seeds]
    except kspace.ParameterError as exc:
        raise UsageError(str(exc)) from exc
    _save_masks(out, masks)
    for i, m in enumerate(masks):
        unit = "lines" if args.kind == "cartesian1d" else "points"
        n = m.count // args.width if args.kind == "cartesian1d" else m.count
        total = args.height if args.kind == "cartesian1d" else args.height * args.width
        print(f"mask_{i}: {n}/{total} {unit}, achieved ratio {m.achieved_ratio:.6f}")
    _manifest(out, args, seeds={"masks": seeds}, achieved_ratio=[m.achieved_ratio for m in masks])


def cmd_phantom(args, out):
    seeds = experiments.derive_seeds(args.seed, args.contrasts)
    ds = experiments.phantom_dataset(args.n_train, args.n_test, args.size, args.contrasts, seeds.data)
    from .imaging import write_dataset

    write_dataset(ds, out, args.format)
    print(f"wrote {len(ds)} slices of {ds.shape} to {out}")
    # the dataset index and the run record share one manifest.json
    index = json.loads((out / "manifest.json").read_text())
    _manifest(out, args, seeds=seeds.to_dict(), **index)


def cmd_train(args, out):
    _check_data_flags(args)
    spec = _spec(args.model, args.blocks, args.contrasts, args.lam)
    seeds = experiments.derive_seeds(args.seed, args.contrasts)
    cfg = _train_cfg(args, seeds)
    ds = _dataset(args, seeds)
    if ds.shape[0] != spec.contrasts:
        spec = _spec(args.model, args.blocks, ds.shape[0], args.lam)
    masks = _masks(args, ds.shape)
    model = xavier_init(build_model(spec), seeds.init)
    n = count_params(model)
    closed = count_params_closed_form(spec)
    print(f"{spec.label}: {n} parameters (closed form {closed})")
    if n != closed:
        raise AssertionError("parameter count mismatch")
    _save_masks(out, masks)
    res = train(model, ds, masks, cfg, out_dir=out)
    save_checkpoint(model, out / "model.ckp", {"iterations": cfg.iterations, "seeds": seeds.to_dict()})
    print(f"trained {cfg.iterations} iterations in {res.seconds:.1f}s")
    _manifest(out, args, seeds=seeds.to_dict(), params=n, train_config=cfg.to_dict(),
              model_spec=asdict(spec), timings={"train_seconds": res.seconds},
              final_loss=res.losses[-1] if res.losses else None)


def cmd_reconstruct(args, out):
    _check_data_flags(args)
    methods = args.method or (["zero-fill", "fcsa-mt"] + (["deep"] if args.checkpoint else []))
    if "deep" in methods and not args.checkpoint:
        raise UsageError("method 'deep' needs --checkpoint")
    fcfg = _fcsa_cfg(args)
    model = None
    if "deep" in methods:
        model, _ = load_checkpoint(args.checkpoint)
    seeds = experiments.derive_seeds(args.seed, args.contrasts)
    ds = _dataset(args, seeds)
    if model is not None and model.spec.contrasts != ds.shape[0]:
        raise UsageError(f"checkpoint expects {model.spec.contrasts} contrasts, data has {ds.shape[0]}")
    try:
        fcfg.validate(ds.shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    L, H, W = ds.shape
    if args.full_sampling:
        masks = [kspace.full_mask(H, W) for _ in range(L)]
    else:
        masks = _masks(args, ds.shape)
    marr = experiments.mask_array(masks)
    part = ds.subset(args.split)
    items = list(part)[: args.limit or None]
    reports, timings, consistency = [], {m: 0.0 for m in methods}, []
    solved = {}
    if "fcsa-mt" in methods:
        t0 = time.perf_counter()
        results = experiments.parallel_map(
            lambda item: fcsa.fcsa_mt_solve(experiments.measurements(item[0].data, masks), fcfg), items)
        timings["fcsa-mt"] = time.perf_counter() - t0
        solved = {ident: res for (_, ident), res in zip(items, results)}
    for im, ident in items:
        truth = im.data
        y, zf = simulate(truth[None], marr)
        recon = {}
        if "zero-fill" in methods:
            recon["zero-fill"] = zf[0]
        if "fcsa-mt" in methods:
            recon["fcsa-mt"] = solved[ident].image
            solved[ident].write_trace(out / f"{ident}_fcsa_trace.csv")
        if "deep" in methods:
            rec = []
            t0 = time.perf_counter()
            x = forward_reconstruct(model, zf.astype(model.dtype), y, marr, record=rec).data
            timings["deep"] += time.perf_counter() - t0
            recon["deep"] = x[0].astype(np.float64)
            pre = rec[-1]["pre_dc"].astype(np.float64)
            spec_k = kspace.fidelity_spectrum(pre, y, marr[None], model.spec.lam)
            consistency.append({"id": ident, "rel_err": kspace.sampled_relative_error(spec_k, y, marr[None])})
        for method, r in recon.items():
            tag = method.replace("-", "_")
            for c, name in enumerate(im.contrast_names):
                io.write_f32_image(out / f"{ident}_{name}_{tag}.f32", r[c])
                io.write_png_gray(out / f"{ident}_{name}_{tag}.png", np.clip(r[c], 0, 1))
                io.write_png_gray(out / f"{ident}_{name}_{tag}_err.png", metrics.error_map(r[c], truth[c]))
            reports.append(metrics.evaluate_stack(r, truth, ident, method, im.contrast_names))
    metrics.write_metrics_csv(out / "metrics.csv", reports)
    for method in methods:
        vals = [rep.mean_psnr for rep in reports if rep.method == method]
        print(f"{method:10s} mean PSNR {np.mean(vals):.3f} dB over {len(vals)} slices")
    if consistency:
        worst = max(c["rel_err"] for c in consistency)
        print(f"deep k-space consistency: max sampled rel. error {worst:.3e}")
    _manifest(out, args, seeds=seeds.to_dict(), fcsa_config=fcsa.config_dict(fcfg), timings=timings,
              reports=[asdict(r) for r in reports], consistency=consistency)


def _quantiles(ts):
    return {"median": float(np.median(ts)), "min": float(np.min(ts)), "max": float(np.max(ts)),
            "q25": float(np.percentile(ts, 25)), "q75": float(np.percentile(ts, 75))}


def benchmark_forward(model, H, W, repeats, seed=0) -> list[float]:
    """Wall-clock seconds of ``forward_reconstruct`` on one simulated slice."""
    rng = np.random.default_rng(seed)
    L = model.spec.contrasts
    truth = rng.random((1, L, H, W))
    marr = np.stack([kspace.make_mask("cartesian1d", H, W, 0.2, 0.04, seed=seed + i).grid for i in range(L)])
    y, zf = simulate(truth, marr)
    zf = zf.astype(model.dtype)
    forward_reconstruct(model, zf, y, marr)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward_reconstruct(model, zf, y, marr)
        times.append(time.perf_counter() - t0)
    return times


def cmd_benchmark(args, out):
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = xavier_init(build_model(_spec(args.model, args.blocks, args.contrasts)), args.seed)
    with _limit_threads(1):
        times = benchmark_forward(model, args.height, args.width, args.repeats, args.seed)
    q = _quantiles(times)
    verdict = "within" if q["median"] <= args.budget else "over"
    print(f"{model.spec.label} {args.height}x{args.width}x{model.spec.contrasts}: median {q['median']:.3f}s "
          f"(min {q['min']:.3f}, max {q['max']:.3f}, n={len(times)}) per slice, {verdict} {args.budget:g}s budget")
    _manifest(out, args, model_spec=asdict(model.spec), timings={"forward_seconds": times, **q})


def cmd_shift_experiment(args, out):
    _check_data_flags(args)
    if args.shift_range < 0 or args.shift_max < 0:
        raise UsageError("shift ranges must be nonnegative")
    seeds = experiments.derive_seeds(args.seed, args.contrasts)
    cfg = _train_cfg(args, seeds)
    fcfg = _fcsa_cfg(args)
    ds = _dataset(args, seeds)
    if not 0 <= args.shifted_contrast < ds.shape[0]:
        raise UsageError(f"--shifted-contrast must lie in [0, {ds.shape[0]})")
    masks = _masks(args, ds.shape)
    t0 = time.perf_counter()
    rows = experiments.shift_experiment(ds, masks, experiments.shift_grid(args.shift_range), cfg, args.blocks,
                                        seeds.init, fcfg, args.shift_max, args.shifted_contrast)
    _write_rows(out / "shift_psnr.csv", rows)
    for method in ("DISN", "FCSA-MT"):
        base = next(r["psnr_db"] for r in rows if r["method"] == method and r["dx"] == 0 and r["dy"] == 0)
        worst = min(r["psnr_db"] for r in rows if r["method"] == method)
        print(f"{method:8s} PSNR at (0,0) {base:.3f} dB, worst over shifts {worst:.3f} dB")
    _manifest(out, args, seeds=seeds.to_dict(), rows=rows, timings={"seconds": time.perf_counter() - t0})


def cmd_block_sweep(args, out):
    _check_data_flags(args)
    seeds = experiments.derive_seeds(args.seed, args.contrasts)
    cfg = _train_cfg(args, seeds)
    if not args.blocks_list or min(args.blocks_list) < 1:
        raise UsageError("--blocks-list needs positive entries")
    ds = _dataset(args, seeds)
    masks = _masks(args, ds.shape)
    rows = experiments.block_sweep(ds, masks, args.blocks_list, cfg, seeds.init, args.model)
    _write_rows(out / "block_sweep.csv", rows)
    for r in rows:
        print(f"{args.model}-{r['blocks']}B: {r['psnr_db']:.3f} dB (zero-fill {r['zero_fill_db']:.3f})")
    _manifest(out, args, seeds=seeds.to_dict(), rows=rows)


def cmd_gradcheck(args, out):
    results = gradcheck.op_suite(args.seed)
    if not args.skip_network:
        results += gradcheck.network_suite(args.seed)
    table = gradcheck.format_table(results)
    print(table)
    failed = [r.name for r in results if not r.passed]
    if out is not None:
        (out / "gradcheck.txt").write_text(table + "\n")
        _manifest(out, args, results=[asdict(r) for r in results])
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


COMMANDS = {
    "masks": cmd_masks,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "benchmark": cmd_benchmark,
    "shift-experiment": cmd_shift_experiment,
    "block-sweep": cmd_block_sweep,
    "gradcheck": cmd_gradcheck,
}


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("MCMRI_THREADS")
    if threads and not (threads.isdigit() and int(threads) >= 1):
        print(f"mcmri: MCMRI_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_INVALID
    # caps both BLAS threads and the slice-level workers of reconstruct
    limit = _limit_threads(int(threads)) if threads else nullcontext()
    try:
        out = _start(args)
        with limit:
            code = COMMANDS[args.command](args, out)
    except (UsageError, IngestionError, ModelSpecError, kspace.ParameterError, kspace.DimensionError,
            io.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"mcmri {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalAbort, fcsa.SolverAbort, FloatingPointError) as exc:
        print(f"mcmri {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
