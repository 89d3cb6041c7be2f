"""Command-line entry point: ``grassflow <subcommand> [options]``.

Configuration files hold flat ``key=value`` lines with section prefixes
(``train.lr=1e-3``, ``data.name=2spirals``).  Flags override file values,
and ``--set key=value`` overrides any single key.

Exit codes: 0 on success, 1 for runtime or numeric failures, 2 for usage
and configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import field as fieldmod
from . import flow as fl
from . import trainer as tr
from .geometry import ChartSingularityError, RankDeficientError
from .prior import GrassmannGaussianPrior

log = logging.getLogger("grassflow")


class UsageError(Exception):
    """Bad command line or configuration (exit code 2)."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _parse_floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none", "off") else int(s)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_str(s: str):
    return None if s.strip().lower() in ("", "none") else s.strip()


# key -> parser; the section prefix decides where the value goes
KEYS = {
    "seed": int,
    "out": str,
    "threads": int,
    "data.name": str,
    "data.n": int,
    "data.seed": _opt_int,
    "data.path": _opt_str,
    "data.D": int,
    "data.k": int,
    "data.header": lambda s: None if s.strip().lower() in ("", "auto", "none") else _parse_bool(s),
    "data.split": _parse_floats,
    "data.val_n": int,
    "data.test_n": int,
    "data.fresh": _parse_bool,
    "prior.sigma": float,
    "prior.col_var": _opt_float,
    "train.lr": float,
    "train.beta1": float,
    "train.beta2": float,
    "train.adam_eps": float,
    "train.weight_decay": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.lr_step_epoch": _opt_int,
    "train.lr_step_factor": float,
    "train.eval_every": int,
    "train.train_dt": float,
    "train.widths": _parse_ints,
    "train.T_init": float,
    "train.train_time": _parse_bool,
    "solver.method": str,
    "solver.atol": float,
    "solver.rtol": float,
    "solver.t0": float,
    "solver.t1": _opt_float,
    "solver.max_steps": int,
    "solver.fixed_dt": float,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    data: dict = field(default_factory=lambda: {
        "name": "2spirals", "n": 1000, "seed": None, "path": None, "D": 3, "k": 1,
        "header": None, "split": (0.8, 0.1, 0.1), "val_n": 500, "test_n": 500, "fresh": True,
    })
    prior: dict = field(default_factory=lambda: {"sigma": 0.3, "col_var": None})
    train: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    def set(self, key: str, raw: str) -> None:
        if key not in KEYS:
            raise UsageError(f"unknown config key {key!r}")
        try:
            value = KEYS[key](raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
        if "." in key:
            section, name = key.split(".", 1)
            getattr(self, section)[name] = value
        else:
            setattr(self, key, value)

    # resolved pieces -------------------------------------------------------

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def dims(self) -> tuple[int, int]:
        if self.data["name"] in ds.TEXTURES:
            return (3, 1)
        return (int(self.data["D"]), int(self.data["k"]))

    def data_seed(self) -> int:
        return self.seed if self.data["seed"] is None else int(self.data["seed"])

    def solver_config(self) -> fl.SolverConfig:
        try:
            return fl.SolverConfig(**self.solver)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    def train_config(self) -> tr.TrainConfig:
        kw = dict(self.train)
        kw.setdefault("widths", _default_widths(self.dims))
        try:
            return tr.TrainConfig(seed=self.seed, solver=self.solver_config(), out_dir=str(self.resolve(self.out)), **kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    def make_prior(self) -> GrassmannGaussianPrior:
        D, k = self.dims
        sigma = float(self.prior["sigma"])
        col = self.prior["col_var"]
        col_var = (sigma**2 if k > 1 else 1.0) if col is None else float(col)
        return GrassmannGaussianPrior.isotropic(np.eye(D, k), sigma**2, col_var)

    def as_lines(self) -> list[str]:
        lines = [f"seed={self.seed}", f"out={self.out}", f"threads={self.threads}"]
        for section in ("data", "prior", "train", "solver"):
            for k, v in getattr(self, section).items():
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{section}.{k}={'none' if v is None else v}")
        return lines


def _default_widths(dims):
    D, k = dims
    if (D, k) == (3, 1):
        return fieldmod.TEXTURE_WIDTHS
    return (D * k, 64, 64, 64, 1)


def read_config(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        items.append((key.strip(), value.strip()))
    return items


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.base_dir = Path(args.config).resolve().parent
        for key, value in read_config(args.config):
            cfg.set(key, value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
        cfg.base_dir = Path.cwd()
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "solver", None) is not None:
        cfg.solver["method"] = args.solver
    if getattr(args, "atol", None) is not None:
        cfg.solver["atol"] = args.atol
    if getattr(args, "rtol", None) is not None:
        cfg.solver["rtol"] = args.rtol
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _limit_threads(n: int):
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _solver_from_args(args) -> fl.SolverConfig:
    kw = {}
    if args.solver is not None:
        kw["method"] = args.solver
    if args.atol is not None:
        kw["atol"] = args.atol
    if args.rtol is not None:
        kw["rtol"] = args.rtol
    try:
        return fl.SolverConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_sidecar(path: Path, meta: dict) -> None:
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(cfg: RunConfig) -> tr.TrainData:
    """Train/validation/test data described by ``cfg.data``."""
    d = cfg.data
    seed = cfg.data_seed()
    name = d["name"]
    if name in ds.TEXTURES:
        rng_val, rng_test, rng_train = (np.random.default_rng([seed, i]) for i in range(3))
        val = ds.texture_points(name, int(d["val_n"]), rng_val)
        test = ds.texture_points(name, int(d["test_n"]), rng_test)
        if d["fresh"]:
            return tr.TrainData(val=val, test=test, sampler=lambda rng, n: ds.texture_points(name, n, rng))
        return tr.TrainData(val=val, test=test, train=ds.texture_points(name, int(d["n"]), rng_train))
    if name == "csv":
        if not d["path"]:
            raise UsageError("data.path is required for data.name=csv")
        batch = ds.load_csv(cfg.resolve(d["path"]), int(d["D"]), int(d["k"]), d["header"])
        try:
            train, val, test = ds.split(batch, d["split"], seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return tr.TrainData(val=val.points, test=test.points, train=train.points)
    raise UsageError(f"unknown dataset {name!r}; valid names: {', '.join(ds.DATASET_NAMES)}")


def _nll_stats(params, prior, points, solver):
    lp = fl.log_prob(params, prior, points, solver)
    nll = -np.atleast_1d(lp)
    return float(np.mean(nll)), float(np.std(nll)), nll


# --------------------------------------------------------------------------
# density grid
# --------------------------------------------------------------------------


def sphere_grid(resolution: int):
    """Cell centres of a lat-long grid with 2r longitudes and r latitudes.

    Returns ``theta`` (polar angle), ``phi`` (longitude), unit vectors
    (r, 2r, 3) and normalized area weights that sum to one over the sphere.
    """
    r = int(resolution)
    if r < 1:
        raise UsageError("resolution must be at least 1")
    theta = (np.arange(r) + 0.5) * math.pi / r
    phi = (np.arange(2 * r) + 0.5) * math.pi / r
    T, P = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack((np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)), axis=-1)
    # exact cell areas over the band, divided by 4 pi
    edges = np.arange(r + 1) * math.pi / r
    band = (np.cos(edges[:-1]) - np.cos(edges[1:])) * (math.pi / r) / (4.0 * math.pi)
    weights = np.repeat(band[:, None], 2 * r, axis=1)
    return T, P, pts, weights


def density_grid(params, prior, resolution: int, solver: fl.SolverConfig):
    """log p on the grid, shape (r, 2r), plus the grid description."""
    if prior.dims != (3, 1):
        raise UsageError(f"density-grid needs a Gr(1,3) model, got dims {prior.dims}")
    T, P, pts, weights = sphere_grid(resolution)
    logp = np.asarray(fl.log_prob(params, prior, pts.reshape(-1, 3, 1), solver)).reshape(T.shape)
    return T, P, logp, weights


def write_ppm(path, values: np.ndarray) -> None:
    """Binary greyscale PPM (P6); brighter pixels mark larger values."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    lo = float(v[finite].min()) if finite.any() else 0.0
    hi = float(v[finite].max()) if finite.any() else 1.0
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    scaled = np.where(finite, scaled, 0.0)
    grey = np.round(255 * scaled).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    h, w = grey.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    name = args.name or cfg.data["name"]
    n = args.n if args.n is not None else int(cfg.data["n"])
    if name not in ds.TEXTURES:
        raise UsageError(f"unknown texture {name!r}; valid names: {', '.join(ds.TEXTURES)}")
    seed = cfg.seed if args.seed is not None else cfg.data_seed()
    try:
        batch = ds.generate_texture(ds.DatasetSpec(name, n, seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out if args.out is not None else f"{name}.csv")
    ds.write_csv(out, batch.points)
    _write_sidecar(out, {"name": name, "n": n, "seed": seed, "dims": [3, 1]})
    print(f"wrote {n} points to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    tcfg = cfg.train_config()
    data = load_dataset(cfg)
    prior = cfg.make_prior()
    out = Path(tcfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(cfg.as_lines()) + "\n")
    with _limit_threads(cfg.threads):
        ckpt = tr.train(tcfg, data, prior)
        val = ckpt.best_val_nll
        if tcfg.epochs == 0 or val is None:
            val = tr.loss_nll(ckpt.params, prior, data.val, tcfg.solver)
    print(f"trained {ckpt.epoch} epochs; final val NLL {val:.6f}; checkpoints in {out}")
    return 0


def cmd_sample(args) -> int:
    ckpt = tr.Checkpoint.load(args.checkpoint)
    if args.n < 0:
        raise UsageError("n must be non-negative")
    solver = _solver_from_args(args)
    rng = tr.make_rng(args.seed if args.seed is not None else 0)
    with _limit_threads(args.threads):
        pts = fl.sample_flow(ckpt.params, ckpt.prior, rng, args.n, solver)
    pts = np.asarray(pts).reshape((args.n,) + ckpt.prior.dims)
    out = Path(args.out)
    ds.write_csv(out, pts)
    D, k = ckpt.prior.dims
    _write_sidecar(out, {"checkpoint": str(args.checkpoint), "n": args.n, "seed": args.seed, "dims": [D, k]})
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_density_grid(args) -> int:
    ckpt = tr.Checkpoint.load(args.checkpoint)
    solver = _solver_from_args(args)
    with _limit_threads(args.threads):
        T, P, logp, weights = density_grid(ckpt.params, ckpt.prior, args.resolution, solver)
    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    with csv_path.open("w") as fh:
        fh.write("theta,phi,logp\n")
        for t, p, v in zip(T.ravel(), P.ravel(), logp.ravel()):
            fh.write(f"{float(t)!r},{float(p)!r},{float(v)!r}\n")
    ppm_path = out.with_suffix(".ppm")
    write_ppm(ppm_path, logp)
    mass = float(np.sum(np.exp(logp) * weights))
    _write_sidecar(csv_path, {
        "checkpoint": str(args.checkpoint), "resolution": args.resolution,
        "rows": "theta (polar angle) by phi (longitude)", "grid_mass": mass,
    })
    print(f"wrote {csv_path} and {ppm_path}; grid mass {mass:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = tr.Checkpoint.load(args.checkpoint)
    D, k = ckpt.prior.dims
    batch = ds.load_csv(args.data, D, k)
    if len(batch) == 0:
        raise UsageError(f"no data rows in {args.data}")
    solver = _solver_from_args(args)
    with _limit_threads(args.threads):
        mean, std, _ = _nll_stats(ckpt.params, ckpt.prior, batch.points, solver)
    print(f"NLL {mean:.6f} +- {std:.6f} (n={len(batch)})")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default 1)")
    common.add_argument("--solver", choices=fl.METHODS, default=None)
    common.add_argument("--atol", type=float, default=None)
    common.add_argument("--rtol", type=float, default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = argparse.ArgumentParser(prog="grassflow", description="Continuous normalizing flows on Grassmann manifolds.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a toy texture dataset as CSV")
    g.add_argument("--name", default=None, help=f"one of {', '.join(ds.TEXTURES)}")
    g.add_argument("--n", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a flow")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=1000)
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("density-grid", parents=[common], help="log-density on a sphere grid (Gr(1,3) only)")
    d.add_argument("checkpoint")
    d.add_argument("--resolution", type=int, default=100)
    d.set_defaults(func=cmd_density_grid)

    e = sub.add_parser("eval", parents=[common], help="mean NLL of a CSV dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.set_defaults(func=cmd_eval)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GRASSFLOW_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("sample", "density-grid", "eval") and args.out is None and args.command != "eval":
        args.out = "samples.csv" if args.command == "sample" else "density"
    if args.threads is None and args.command != "train":
        args.threads = 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"grassflow: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"grassflow: error: {exc}", file=sys.stderr)
        return 2
    except (ds.DataError, RankDeficientError) as exc:
        print(f"grassflow: error: {exc}", file=sys.stderr)
        return 2
    except (tr.TrainingDiverged, tr.NonFiniteLoss, fl.SolverError, ChartSingularityError, FloatingPointError) as exc:
        print(f"grassflow: failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"grassflow: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
