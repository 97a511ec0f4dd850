"""Command-line front door: ``locolab <command> [flags]``.

Settings are layered: command-line flags override a ``key = value`` config
file (``--config``, ``#`` starts a comment), which overrides the defaults in
:class:`RunConfig`.  Every command draws its randomness from
``seed XOR crc32(command)``, so the same config always writes the same files.

Exit status: 0 success, 1 a hard invariant failed (for example a degenerate
editing direction or a rank above its bound), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness
from .edit import Mask, apply_edit, find_edit_directions, save_direction
from .errors import ConfigError, DegenerateDirectionError, LocoError, ModelError
from .molrg import SubspaceModel, load_model, localized_model, random_model, sample_x0
from .pmp import JacobianOperator, epsilon_predictor
from .sampler import integrate, roundtrip_error
from .schedule import NoiseSchedule
from .spectral import LinearMap, dense_svd, gpm_topk, principal_angles

__all__ = ["RunConfig", "COMMANDS", "parse_config", "dispatch", "main", "task_rng"]

COMMANDS = ("rank-curve", "linearity-curve", "symmetry-curve", "subspace-curve",
            "epsrank-curve", "theorem1", "edit", "roundtrip", "gpm-check")


@dataclass(frozen=True)
class RunConfig:
    schedule: str = "cosine"
    model_file: Optional[str] = None
    layout: str = "dense"  # "dense" random bases or coordinate-"localized" ones
    dim: int = 32
    ranks: tuple = (2, 2)
    seed: int = 0
    t_grid: tuple = harness.DEFAULT_T_GRID
    lambda_grid: tuple = harness.DEFAULT_LAMBDA_GRID
    eta: float = 0.99
    r: int = 5
    r_null: int = 5
    pick: int = 1
    t: float = 0.6
    t_mid: float = 0.6
    steps: int = 100
    grid: str = "uniform"
    n_samples: int = harness.DEFAULT_N_SAMPLES
    mask: str = "0-7"
    lam: float = 8.0
    out_dir: str = "out"
    out: Optional[str] = None


# config-file / flag spelling -> (field, parser)
def _floats(s):
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in str(s).split(",") if v.strip())


_KEYS = {
    "schedule": ("schedule", str),
    "model-file": ("model_file", str),
    "layout": ("layout", str),
    "dim": ("dim", int),
    "ranks": ("ranks", _ints),
    "seed": ("seed", int),
    "t-grid": ("t_grid", _floats),
    "lambda-grid": ("lambda_grid", _floats),
    "eta": ("eta", float),
    "r": ("r", int),
    "r-null": ("r_null", int),
    "pick": ("pick", int),
    "t": ("t", float),
    "t-mid": ("t_mid", float),
    "steps": ("steps", int),
    "grid": ("grid", str),
    "n-samples": ("n_samples", int),
    "mask": ("mask", str),
    "lambda": ("lam", float),
    "out-dir": ("out_dir", str),
    "out": ("out", str),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="locolab", add_help=False, allow_abbrev=False)
    p.add_argument("--config")
    for key in _KEYS:
        p.add_argument(f"--{key}", dest=key.replace("-", "_") + "__raw", default=None)
    return p


def _read_config_file(path) -> dict:
    raw = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "lam":
            key = "lambda"
        if key not in _KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        raw[key] = value
    return raw


def _convert(key, value):
    name, conv = _KEYS[key]
    try:
        return name, conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed value {value!r} for {key!r}") from exc


def validate(cfg: RunConfig) -> RunConfig:
    """Check every setting against the preconditions of the code it feeds."""
    def bad(key, why):
        raise ConfigError(f"{key}: {why}")

    try:
        NoiseSchedule(cfg.schedule)
    except ValueError:
        bad("schedule", f"unknown kind {cfg.schedule!r}")
    if cfg.layout not in ("dense", "localized"):
        bad("layout", "must be 'dense' or 'localized'")
    if cfg.model_file is None:
        if not cfg.ranks or any(r < 1 for r in cfg.ranks):
            bad("ranks", "need at least one positive rank")
        if cfg.dim < sum(cfg.ranks):
            bad("dim", f"{cfg.dim} is smaller than the total rank {sum(cfg.ranks)}")
        if cfg.layout == "localized" and cfg.dim // len(cfg.ranks) < max(cfg.ranks):
            bad("dim", "too small to give every component its own coordinate block")
    if cfg.seed < 0:
        bad("seed", "must be nonnegative")
    if not 0.0 < cfg.eta < 1.0:
        bad("eta", f"{cfg.eta} must lie in (0, 1)")
    if cfg.r < 1:
        bad("r", "must be at least 1")
    if cfg.r_null < 1:
        bad("r-null", "must be at least 1")
    if not 1 <= cfg.pick <= cfg.r:
        bad("pick", f"must lie in [1, r={cfg.r}]")
    if not 0.0 < cfg.t < 1.0:
        bad("t", f"{cfg.t} must lie in (0, 1)")
    if not 0.0 <= cfg.t_mid <= 1.0:
        bad("t-mid", f"{cfg.t_mid} must lie in [0, 1]")
    if cfg.steps < 1:
        bad("steps", "must be at least 1")
    if cfg.grid not in ("uniform", "quadratic"):
        bad("grid", "must be 'uniform' or 'quadratic'")
    if cfg.n_samples < 1:
        bad("n-samples", "must be at least 1")
    if not cfg.t_grid or any(not 0.0 < t < 1.0 for t in cfg.t_grid):
        bad("t-grid", "every value must lie in (0, 1)")
    if not cfg.lambda_grid:
        bad("lambda-grid", "must not be empty")
    try:
        Mask.parse(cfg.mask, 10**9)
    except (ValueError, LocoError):
        bad("mask", f"cannot parse {cfg.mask!r}")
    return cfg


def parse_config(args: Sequence[str] = (), file: Optional[str] = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from flags, a config file and defaults.

    A ``--config`` flag inside ``args`` takes precedence over ``file``.
    Raises :class:`~locolab.errors.ConfigError` naming the offending key.
    """
    ns = _flag_parser().parse_args(list(args))
    layered = {}
    path = ns.config or file
    if path is not None:
        layered.update(_read_config_file(path))
    for key in _KEYS:
        value = getattr(ns, key.replace("-", "_") + "__raw")
        if value is not None:
            layered[key] = value
    values = dict(_convert(k, v) for k, v in layered.items())
    return validate(replace(RunConfig(), **values))


def task_rng(seed: int, task: str) -> np.random.Generator:
    """Generator for one task: ``seed XOR crc32(task)``."""
    return np.random.default_rng(int(seed) ^ zlib.crc32(task.encode()))


def build_model(cfg: RunConfig) -> SubspaceModel:
    schedule = NoiseSchedule(cfg.schedule)
    if cfg.model_file is not None:
        return load_model(cfg.model_file, schedule)
    if cfg.layout == "localized":
        block = cfg.dim // len(cfg.ranks)
        supports = [range(k * block, (k + 1) * block) for k in range(len(cfg.ranks))]
        return localized_model(cfg.dim, cfg.ranks, supports, cfg.seed, schedule)
    return random_model(cfg.dim, cfg.ranks, cfg.seed, schedule)


def _run_meta(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "model_file": cfg.model_file or "none", "layout": cfg.layout}


_CURVE_OK = {"ok"}


def _emit(table, cfg, out_dir, hard=True) -> int:
    table.meta.update(_run_meta(cfg))
    path = table.write(out_dir)
    status = [str(s) for s in table.column("status")] if "status" in table.columns else []
    bad = [s for s in status if s not in _CURVE_OK]
    print(f"wrote {path} ({len(table)} rows, {len(bad)} flagged)")
    return 1 if hard and bad else 0


def _cmd_curve(cfg, model, out_dir, command):
    rng = task_rng(cfg.seed, command)
    if command == "rank-curve":
        table = harness.rank_ratio_curve(model, cfg.t_grid, cfg.eta, cfg.n_samples, rng)
    elif command == "linearity-curve":
        table = harness.linearity_curve(model, cfg.t, cfg.lambda_grid, cfg.n_samples, rng)
    elif command == "symmetry-curve":
        table = harness.symmetry_curve(model, cfg.t_grid, cfg.n_samples, rng)
    elif command == "subspace-curve":
        table = harness.subspace_convergence_curve(model, cfg.t_grid, cfg.n_samples, rng)
        # bound excess is a finding about the bound, not an invariant failure
        return _emit(table, cfg, out_dir, hard=False)
    elif command == "epsrank-curve":
        table = harness.epsilon_rank_relation(model, cfg.t_grid, cfg.eta, rng, cfg.n_samples)
    else:
        table = harness.theorem1_report(model, cfg, rng)
        _emit(table, cfg, out_dir, hard=False)
        return 0 if all(table.column("passed")) else 1
    return _emit(table, cfg, out_dir)


def _eps(model):
    return lambda x, t: epsilon_predictor(model, x, t)


def _cmd_edit(cfg, model, out_dir):
    rng = task_rng(cfg.seed, "edit")
    mask = Mask.parse(cfg.mask, model.d)
    x0 = sample_x0(model, rng).x0
    xt = integrate(x0, 0.0, cfg.t, cfg.steps, _eps(model), model.schedule, cfg.grid)
    direction = find_edit_directions(model, xt, cfg.t, mask, cfg.r, cfg.r_null, cfg.pick, rng)
    edited = apply_edit(model, x0, cfg.t, direction, cfg.lam, cfg.steps, cfg.grid)
    out = Path(cfg.out) if cfg.out else Path(out_dir) / "direction.txt"
    save_direction(direction, out)
    print(f"wrote {out} (sigma={direction.sigma:.6g}, pick={direction.pick})")
    delta = edited - x0
    inside = mask.apply(delta)
    rows = [(i, x0[i], edited[i], delta[i], int(i in set(mask.indices)), "ok")
            for i in range(model.d)]
    table = harness.CurveTable(
        "edit", ("index", "x0", "edited", "delta", "in_mask", "status"), rows,
        {"t": cfg.t, "lambda": cfg.lam, "steps": cfg.steps, "grid": cfg.grid,
         "inside_norm": float(np.linalg.norm(inside)),
         "outside_norm": float(np.linalg.norm(delta - inside))})
    return _emit(table, cfg, out_dir)


def _cmd_roundtrip(cfg, model, out_dir):
    rng = task_rng(cfg.seed, "roundtrip")
    x0s = [sample_x0(model, rng).x0 for _ in range(cfg.n_samples)]
    rows = []
    for n in (cfg.steps, 2 * cfg.steps):
        errs = np.array([roundtrip_error(model, x0, cfg.t_mid, n, cfg.grid) for x0 in x0s])
        rows.append((n, errs.mean(), errs.max(), "ok"))
    table = harness.CurveTable(
        "roundtrip", ("n_steps", "error_mean", "error_max", "status"), rows,
        {"d": model.d, "K": model.K, "ranks": list(model.ranks),
         "schedule": model.schedule.kind, "t_mid": cfg.t_mid, "grid": cfg.grid,
         "n_samples": cfg.n_samples})
    return _emit(table, cfg, out_dir)


def _cmd_gpm_check(cfg, model, out_dir):
    """Top singular triplets of the Jacobian at one draw, GPM against LAPACK."""
    rng = task_rng(cfg.seed, "gpm-check")
    x0 = sample_x0(model, rng).x0
    a = model.alpha(cfg.t)
    xt = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * rng.standard_normal(model.d)
    op = JacobianOperator(model, xt, cfg.t)
    k = min(cfg.r, model.total_rank)
    res = gpm_topk(LinearMap(op.jvp, op.vjp, (model.d, model.d)), k, rng=rng)
    _, s, Vt = dense_svd(op.matrix())
    rel = np.abs(res.sigma - s[:k]) / s[:k]
    rows = []
    for i in range(k):
        angle = float(principal_angles(res.V[:, i], Vt[i])[0])
        ok = rel[i] <= 1e-6
        rows.append((i + 1, res.sigma[i], s[i], rel[i], angle, "ok" if ok else "sigma_mismatch"))
    table = harness.CurveTable(
        "gpm", ("index", "sigma_gpm", "sigma_dense", "rel_err", "angle", "status"), rows,
        {"t": cfg.t, "iterations": res.iterations, "converged": int(res.converged)})
    code = _emit(table, cfg, out_dir)
    return code if res.converged else 1


def dispatch(config: RunConfig, command: str) -> int:
    """Run ``command`` and return its exit status (see module docstring)."""
    if command not in COMMANDS:
        print(f"locolab: unknown command {command!r}; choose from {', '.join(COMMANDS)}",
              file=sys.stderr)
        return 2
    try:
        model = build_model(config)
    except OSError as exc:
        print(f"locolab: cannot load model: {exc}", file=sys.stderr)
        return 2
    except (ModelError, ConfigError) as exc:
        print(f"locolab: invalid model: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if command == "edit":
            return _cmd_edit(config, model, out_dir)
        if command == "roundtrip":
            return _cmd_roundtrip(config, model, out_dir)
        if command == "gpm-check":
            return _cmd_gpm_check(config, model, out_dir)
        return _cmd_curve(config, model, out_dir, command)
    except DegenerateDirectionError as exc:
        print(f"locolab: degenerate direction: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"locolab: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"locolab: I/O error: {exc}", file=sys.stderr)
        return 2


USAGE = f"usage: locolab {{{'|'.join(COMMANDS)}}} [--config FILE] [--key value ...]"


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        print("keys: " + ", ".join(f"--{k}" for k in _KEYS))
        return 0 if argv else 2
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        print(f"locolab: unknown command {command!r}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(rest)
    except ConfigError as exc:
        print(f"locolab: usage error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"locolab: {exc}", file=sys.stderr)
        return 2
    return dispatch(cfg, command)


if __name__ == "__main__":
    sys.exit(main())
