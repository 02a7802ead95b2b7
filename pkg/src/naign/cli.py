"""Command-line entry point: ``naign <command> [flags]``.

Exit codes: 0 success, 1 check or evaluation failure, 2 usage or config error.
"""
import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import fields, gradcheck, metrics
from .net import forward
from .trainer import (CheckpointError, ConfigError, TrainConfig, TrainingDivergedError,
                      atomic_write, load_checkpoint, run_training)

log = logging.getLogger("naign")


class UsageError(Exception):
    pass


class Run:
    """Tracks files written by a command and emits the run manifest at the end."""

    def __init__(self, command, args, out_dir):
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k != "func"}
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.t0 = time.time()

    def path(self, name):
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def write_text(self, name, text):
        atomic_write(self.path(name), text.encode())

    def finish(self):
        checksums = {}
        for p in self.outputs:
            if p.exists():
                checksums[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        blob = json.dumps(self.args, sort_keys=True, default=str)
        manifest = {
            "command": self.command,
            "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
            "seed": self.args.get("seed"),
            "outputs": sorted(checksums),
            "wall_time_s": round(time.time() - self.t0, 3),
            "checksums": checksums,
        }
        atomic_write(self.out_dir / "manifest.json",
                     (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _floats(text, n=None, what="value"):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _resolution(text):
    vals = [int(v) for v in _floats(text, what="resolution")]
    return (vals[0], vals[0]) if len(vals) == 1 else tuple(vals[:2])


def _dataset_from_args(args, n, seed):
    name = args.dataset
    if name in ds.GENERATORS:
        return ds.generate(name, n, args.noise, seed)
    if name == "mnist":
        if not args.images:
            raise UsageError("--images is required for --dataset mnist")
        d = ds.load_idx_images(args.images, getattr(args, "labels", None))
    elif Path(name).suffix == ".csv" and Path(name).exists():
        meta = Path(name).with_suffix(".json")
        d = ds.load_csv(name, meta if meta.exists() else None)
    else:
        raise UsageError(f"unknown dataset {name!r}")
    return ds.Dataset(d.points[:n], d.name, d.mode_centers, d.noise_sigma,
                      None if d.labels is None else d.labels[:n], d.meta)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _sample_prior(ckpt, n, real, seed):
    prior = ckpt.config.get("prior", "standard_normal") if ckpt.config else "standard_normal"
    spec = ds.PriorSpec(prior, ckpt.params.arch.input_dim)
    return ds.sample_prior(spec, n, reference_batch=real, seed=seed)


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    run = Run("gen-data", args, args.out_dir)
    d = _dataset_from_args(args, args.n, args.seed)
    ds.save_csv(d, run.path("dataset.csv"), run.path("dataset.json"))
    run.finish()
    print(f"wrote {d.n} x {d.dim} points to {run.out_dir / 'dataset.csv'}")
    return 0


def cmd_train(args):
    try:
        cfg_dict = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    try:
        config = TrainConfig.from_dict(cfg_dict)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"config error: {exc}") from None
    run = Run("train", args, args.out_dir)
    run.args["config_contents"] = config.to_dict()
    run.args["seed"] = config.seed
    run.path("train_log.ndjson")
    run.path("checkpoint_final.naig")
    try:
        final, records = run_training(config, run.out_dir)
    except TrainingDivergedError as exc:
        run.path("checkpoint_last_good.naig")
        run.finish()
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    run.outputs += sorted(run.out_dir.glob("checkpoint_0*.naig"))
    run.finish()
    if records:
        print(json.dumps(records[-1], sort_keys=True))
    return 0


def cmd_eval_gen(args):
    ckpt = _load_ckpt(args.ckpt)
    real_ds = _dataset_from_args(args, args.n_real, args.seed)
    real = real_ds.points
    if real.shape[1] != ckpt.params.arch.input_dim:
        raise UsageError(f"checkpoint dim {ckpt.params.arch.input_dim} does not match dataset "
                         f"dim {real.shape[1]}")
    run = Run("eval-gen", args, args.out_dir)
    rng = np.random.default_rng([args.seed, 7])
    if args.self_test:
        passes = {"real": real.copy()}
    else:
        z = _sample_prior(ckpt, args.n_gen, real[:min(len(real), 256)], rng)
        gen = forward(ckpt.params, z)
        passes = {"f(z)": gen}
        if args.second_pass:
            passes["f(f(z))"] = forward(ckpt.params, gen)
    report, rows = {}, {}
    for label, gen in passes.items():
        r = metrics.evaluate_generation(real, gen, k=args.k).to_dict()
        if real_ds.mode_centers is not None:
            sigma = real_ds.noise_sigma if real_ds.noise_sigma > 0 else 0.1
            r["modes"] = metrics.mode_coverage(gen, real_ds.mode_centers, sigma=sigma).to_dict()
        report[label] = r
        rows[label] = {k: r[k] for k in ("fld", "coverage", "density")}
        if "modes" in r:
            rows[label]["covered_modes"] = r["modes"]["covered_modes"]
    run.write_text("eval_gen.json", metrics.report_json(report))
    cols = ["fld", "coverage", "density"] + (["covered_modes"] if real_ds.mode_centers is not None else [])
    run.write_text("eval_gen.csv", metrics.table_csv(rows, cols))
    run.finish()
    print(metrics.table_csv(rows, cols), end="")
    return 0


def _degradation_specs(args):
    kinds = args.degradation.split(",")
    specs = []
    for kind in kinds:
        if kind == "blur" and args.blur_level is None:
            raise UsageError("--blur-level is required for blur degradation")
        try:
            specs.append(ds.DegradationSpec(kind, blur_level=args.blur_level or 0.0,
                                            noise_sigma=args.noise_sigma,
                                            corrupt_frac=args.corrupt_frac,
                                            delete_prob=args.delete_prob))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return specs


def cmd_eval_restore(args):
    ckpt = _load_ckpt(args.ckpt)
    specs = _degradation_specs(args)
    data = _dataset_from_args(args, args.n, args.seed).points
    if data.shape[1] != ckpt.params.arch.input_dim:
        raise UsageError("checkpoint and dataset dimensions differ")
    run = Run("eval-restore", args, args.out_dir)
    report = {}
    for i, spec in enumerate(specs):
        try:
            degraded = ds.degrade(data, spec, seed=np.random.default_rng([args.seed, i]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        restored = forward(ckpt.params, degraded)
        report[spec.kind] = {"mae_restored": metrics.mae(data, restored),
                             "mae_degraded": metrics.mae(data, degraded)}
    run.write_text("eval_restore.json", metrics.report_json(report))
    rows = {"model": {k: v["mae_restored"] for k, v in report.items()},
            "degraded": {k: v["mae_degraded"] for k, v in report.items()}}
    table = metrics.table_csv(rows, list(report))
    run.write_text("eval_restore.csv", table)
    run.finish()
    print(table, end="")
    return 0


def _field_source(args):
    if args.ckpt:
        ckpt = _load_ckpt(args.ckpt)
        if ckpt.params.arch.input_dim != 2:
            raise UsageError("field maps need a 2-D checkpoint")
        return ckpt.params
    if args.true_dataset:
        d = ds.generate(args.true_dataset, args.n, args.noise, args.seed)
        analytic = args.true_dataset == "2moons" or d.mode_centers is not None
        return lambda pts: fields.manifold_distance_oracle(pts, d, analytic=analytic)
    raise UsageError("give --ckpt or --true-dataset")


def _emit_field(run, grid, stem):
    grid.to_csv(run.path(f"{stem}.csv"))
    fields.render_svg(grid, run.path(f"{stem}.svg"))


def cmd_field(args):
    source = _field_source(args)
    bbox = _floats(args.bbox, 4, "--bbox")
    run = Run("field", args, args.out_dir)
    try:
        grid = fields.grid_eval(source, bbox, _resolution(args.res), args.kind, args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit_field(run, grid, args.kind)
    run.finish()
    print(f"{args.kind}: min={grid.values.min():.6g} max={grid.values.max():.6g}")
    return 0


def cmd_density(args):
    args.kind = "density"
    return cmd_field(args)


def cmd_project(args):
    ckpt = _load_ckpt(args.ckpt)
    if ckpt.params.arch.input_dim != 2:
        raise UsageError("projection maps need a 2-D checkpoint")
    bbox = _floats(args.bbox, 4, "--bbox")
    run = Run("project", args, args.out_dir)
    pts = fields.grid_points(bbox, (args.grid_res, args.grid_res))
    pmap = fields.projection_map(ckpt.params, pts)
    pmap.to_csv(run.path("projection.csv"))
    fields.render_svg(pmap, run.path("projection.svg"))
    run.finish()
    print(f"projected {len(pts)} grid points; mean displacement {pmap.norms.mean():.6g}")
    return 0


def cmd_grad_check(args):
    dims = tuple(int(v) for v in _floats(args.arch, what="--arch"))
    if len(dims) < 3 or dims[0] != dims[-1]:
        raise UsageError("--arch must read in,h1,...,out with in == out")
    report = gradcheck.run_grad_check(dims, args.trials, args.tolerance, args.seed, args.metric,
                                      args.activation, args.h, corrupt=args.corrupt_grad)
    for name, err in report.worst.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:<14} worst relative error {err:.3e}  {status}")
    print(f"worst overall {report.worst_overall:.3e} (tolerance {args.tolerance:g})")
    return 0 if report.passed else 1


# --- parser ------------------------------------------------------------------

def _add_dataset_flags(p):
    p.add_argument("--dataset", required=True,
                   help="2moons, 8gaussians, grids, mnist, or a dataset CSV path")
    p.add_argument("--noise", type=float, default=None,
                   help="noise / std for synthetic data (generator default if omitted)")
    p.add_argument("--images", help="IDX images file (mnist)")
    p.add_argument("--labels", help="IDX labels file (mnist)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")


def build_parser():
    parser = argparse.ArgumentParser(prog="naign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or convert a dataset to CSV")
    _add_dataset_flags(p)
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-gen", help="FLD / coverage / density / mode coverage of samples")
    p.add_argument("--ckpt", required=True)
    _add_dataset_flags(p)
    p.add_argument("--n-real", type=int, default=10_000)
    p.add_argument("--n-gen", type=int, default=10_000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--second-pass", action="store_true", help="also evaluate f(f(z))")
    p.add_argument("--self-test", action="store_true", help="use the real set as generated set")
    p.set_defaults(func=cmd_eval_gen)

    p = sub.add_parser("eval-restore", help="MAE of restoring degraded data")
    p.add_argument("--ckpt", required=True)
    _add_dataset_flags(p)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--degradation", required=True,
                   help="comma-separated kinds: blur, gaussian_noise, salt_pepper, lines_rows")
    p.add_argument("--blur-level", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--corrupt-frac", type=float, default=0.2)
    p.add_argument("--delete-prob", type=float, default=0.2)
    p.set_defaults(func=cmd_eval_restore)

    for name, func, help_text in (("field", cmd_field, "scalar field on a grid"),
                                  ("density", cmd_density, "unnormalized density on a grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt")
        p.add_argument("--true-dataset", help="use the true manifold distance of this dataset")
        p.add_argument("--noise", type=float, default=None)
        p.add_argument("--n", type=int, default=10_000)
        p.add_argument("--seed", type=int, default=0)
        if name == "field":
            p.add_argument("--kind", choices=fields.FIELD_KINDS, default="drift")
        p.add_argument("--bbox", default="-2,3,-2.5,1.5", help="xmin,xmax,ymin,ymax")
        p.add_argument("--res", default="200", help="nx[,ny]")
        p.add_argument("--k", type=float, default=fields.DEFAULT_K)
        p.add_argument("--out-dir", default="out")
        p.set_defaults(func=func)

    p = sub.add_parser("project", help="projection map of a grid through the model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--grid-res", type=int, default=20)
    p.add_argument("--bbox", default="-2,3,-2.5,1.5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--arch", default="2,8,8,2")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", default="l2", choices=("l1", "l2", "sql2"))
    p.add_argument("--activation", default="tanh", choices=("tanh", "leaky_relu", "relu"))
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ds.IdxFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
