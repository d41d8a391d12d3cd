"""Command-line entry point: simulate, fit, predict, and study commands.

Configs are strict JSON documents (unknown keys are rejected, missing keys
named); flags override file values.  Numeric CSV output uses 17 significant
digits so reruns are byte-comparable and cross-implementation comparisons are
possible.  Every command writes a manifest (config echo, seed, content
hashes, duration) next to its outputs.

Exit codes: 0 success, 2 invalid config/arguments, 3 simulation failure,
4 solver/numerical failure, 5 resource limit, 1 unexpected error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, krr
from .dynamics import (
    AdditiveLags,
    GaussianDiag,
    KernelSections,
    NoiseSpec,
    RegressionFunction,
    TanhLinear,
    Trajectory,
    TruncatedGaussian,
    simulate_var,
    stationary_sample,
)
from .errors import (
    ConfigError,
    NumericalError,
    ResourceLimitError,
    SimulationDivergedError,
)
from .experiments import (
    ConcentrationStudyConfig,
    MercerStudyConfig,
    RateStudyConfig,
    concentration_study,
    g_lambda_gap_study,
    lattice_grid,
    mercer_validation_study,
    rate_study,
)
from .kernels import (
    MultivariateKernelSpec,
    multivariate_from_dict,
    spec_from_dict,
)

_FMT = ".17g"


def _fmt(x: float) -> str:
    return format(float(x), _FMT)


def _strict(section: str, data, required: set[str], optional: set[str] = frozenset()):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(data) - required - set(optional))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in '{section}'")
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"missing required key(s) {missing} in '{section}'")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a JSON object")
    return data


def g_from_dict(section: str, data) -> RegressionFunction:
    _strict(section, data, {"kind"}, {"matrix", "scale", "lags", "kernel", "centers", "coeffs", "p"})
    kind = data["kind"]
    if kind == "tanh_linear":
        _strict(section, data, {"kind", "matrix"}, {"scale"})
        return TanhLinear(matrix=np.array(data["matrix"], dtype=float),
                          scale=float(data.get("scale", 1.0)))
    if kind == "additive_lags":
        _strict(section, data, {"kind", "lags"})
        lags = tuple(g_from_dict(f"{section}.lags[{i}]", lag) for i, lag in enumerate(data["lags"]))
        return AdditiveLags(lag_functions=lags)
    if kind == "kernel_sections":
        _strict(section, data, {"kind", "kernel", "centers", "coeffs"}, {"p"})
        return KernelSections(
            kernel=_kernel_scalar(f"{section}.kernel", data["kernel"]),
            centers=np.array(data["centers"], dtype=float),
            coeffs=np.array(data["coeffs"], dtype=float),
            p=int(data.get("p", 1)),
        )
    raise ConfigError(f"unknown g kind {kind!r} in '{section}'")


def noise_from_dict(section: str, data) -> NoiseSpec:
    _strict(section, data, {"kind", "sigma2"}, {"l_eps"})
    sigma2 = tuple(float(s) for s in data["sigma2"])
    if data["kind"] == "gaussian":
        if "l_eps" in data:
            raise ConfigError(f"'l_eps' is only valid for truncated_gaussian in '{section}'")
        return GaussianDiag(sigma2=sigma2)
    if data["kind"] == "truncated_gaussian":
        return TruncatedGaussian(sigma2=sigma2, l_eps=float(data.get("l_eps", 1.0)))
    raise ConfigError(f"unknown noise kind {data['kind']!r} in '{section}'")


def _kernel_scalar(section: str, data):
    # accept a bare spec, or a multivariate block whose components coincide
    try:
        if isinstance(data, dict) and ("shared" in data or "components" in data):
            multi = multivariate_from_dict(data)
            if len(set(multi.components)) != 1:
                raise ValueError("this study takes a single kernel; components differ")
            return multi.components[0]
        return spec_from_dict(data)
    except ValueError as err:
        raise ConfigError(f"bad kernel spec in '{section}': {err}")


def _kernel_multi(section: str, data) -> MultivariateKernelSpec:
    try:
        return multivariate_from_dict(data)
    except ValueError as err:
        raise ConfigError(f"bad multivariate kernel spec in '{section}': {err}")


def grid_from_dict(section: str, data, dim: int) -> np.ndarray:
    _strict(section, data, {"box"}, {"points"})
    return lattice_grid(float(data["box"]), int(data.get("points", 17)), dim)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path: str, command: str, config: dict, seed,
                   inputs: list[str], outputs: list[str], started: float) -> None:
    doc = {
        "tool": "kervar",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": {p: _sha256(p) for p in outputs},
        "duration_s": time.time() - started,
    }
    tmp = f"{out_path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, out_path)


def write_trajectory_csv(path: str, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i + 1}" for i in range(traj.d)])
        for t in range(traj.T):
            writer.writerow([t + 1] + [_fmt(v) for v in traj.values[:, t]])


def read_trajectory_csv(path: str) -> np.ndarray:
    """Read a trajectory CSV back as a (d, T) value matrix."""
    if not os.path.exists(path):
        raise ConfigError(f"trajectory CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "t":
            raise ConfigError(f"{path} lacks the trajectory header 't,x1,...,xd'")
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    if not rows:
        raise ConfigError(f"{path} contains no observations")
    return np.array(rows, dtype=float).T


def read_points_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ConfigError(f"inputs CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or not header[0].startswith("z"):
            raise ConfigError(f"{path} lacks the inputs header 'z1,...,zdp'")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ConfigError(f"{path} contains no query points")
    return np.array(rows, dtype=float)


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, str)) else _fmt(v) for v in row])


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("KERVAR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"KERVAR_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _strict("simulate", cfg, {"d", "p", "T", "seed", "g", "noise"}, {"burn_in"})
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    g = g_from_dict("simulate.g", cfg["g"])
    noise = noise_from_dict("simulate.noise", cfg["noise"])
    traj = simulate_var(
        g, noise, d=int(cfg["d"]), p=int(cfg["p"]), T=int(cfg["T"]),
        burn_in=int(cfg.get("burn_in", 1000)), seed=seed,
    )
    out = args.out or "trajectory.csv"
    write_trajectory_csv(out, traj)
    write_manifest(f"{out}.manifest.json", "simulate", cfg, seed, [args.config], [out], started)
    print(f"wrote {out} ({traj.d} x {traj.T})")
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    _strict("fit", cfg, {"trajectory", "p", "lambda", "kernel"})
    lam = float(cfg["lambda"])
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    values = read_trajectory_csv(cfg["trajectory"])
    d, T = values.shape
    p = int(cfg["p"])
    if T <= p:
        raise ConfigError(f"trajectory length {T} must exceed lag order p={p}")
    traj = Trajectory(values=values, d=d, p=p, T=T, seed=0)
    from .dynamics import lag_embed

    training = lag_embed(traj, p)
    kernel = _kernel_multi("fit.kernel", cfg["kernel"])
    if kernel.d != d:
        raise ConfigError(f"kernel has {kernel.d} components but the trajectory has d={d}")
    if kernel.input_dim != d * p:
        raise ConfigError(
            f"kernel input_dim {kernel.input_dim} != d*p = {d * p}"
        )
    model = krr.fit(kernel, training, lam, T)
    out = args.out or "model.json"
    krr.save_model(model, out)
    diag = krr.objective_value(model, training)
    print(f"objective={_fmt(diag.objective)}")
    print(f"rkhs_norm_sq={_fmt(diag.rkhs_norm_sq)}")
    print(f"in_sample_rmse={_fmt(diag.in_sample_rmse)}")
    print(f"lambda={_fmt(lam)} effective_ridge={_fmt(lam * T)}")
    write_manifest(
        f"{out}.manifest.json", "fit", cfg, None,
        [args.config, cfg["trajectory"]], [out], started,
    )
    return 0


def cmd_predict(args) -> int:
    started = time.time()
    model = krr.load_model(args.model)
    points = read_points_csv(args.inputs)
    if points.shape[1] != model.kernel.input_dim:
        raise ConfigError(
            f"inputs have dimension {points.shape[1]}, model expects {model.kernel.input_dim}"
        )
    preds = krr.predict_batch(model, points)
    out = args.out or "predictions.csv"
    write_csv(out, [f"g{i + 1}" for i in range(model.d)], preds.tolist())
    write_manifest(
        f"{out}.manifest.json", "predict", {"model": args.model, "inputs": args.inputs},
        None, [args.model, args.inputs], [out], started,
    )
    print(f"wrote {out} ({preds.shape[0]} rows)")
    return 0


def _study_rate(cfg: dict, out_dir: str, threads: int) -> list[str]:
    _strict(
        "study", cfg,
        {"g", "noise", "kernel", "lambda", "t_grid", "replicates", "grid", "seed"},
        {"lambda_rule", "burn_in"},
    )
    g = g_from_dict("study.g", cfg["g"])
    noise = noise_from_dict("study.noise", cfg["noise"])
    kernel = _kernel_multi("study.kernel", cfg["kernel"])
    study_cfg = RateStudyConfig(
        g=g,
        noise=noise,
        kernel=kernel,
        lam=float(cfg["lambda"]),
        t_grid=tuple(int(t) for t in cfg["t_grid"]),
        replicates=int(cfg["replicates"]),
        grid=grid_from_dict("study.grid", cfg["grid"], kernel.input_dim),
        seed=int(cfg["seed"]),
        lambda_rule=cfg.get("lambda_rule", "fixed"),
        burn_in=int(cfg.get("burn_in", 1000)),
        threads=threads,
    )
    result = rate_study(study_cfg)
    path = os.path.join(out_dir, "rate.csv")
    write_csv(path, ["T", "replicate", "sup_error"], result.rows)
    if result.slope is None:
        print("slope=absent (single-point T grid)")
    elif result.slope_halfwidth is None:
        print(f"slope={_fmt(result.slope)}")
    else:
        print(f"slope={_fmt(result.slope)} halfwidth={_fmt(result.slope_halfwidth)}")
    return [path]


def _study_concentration(cfg: dict, out_dir: str, threads: int) -> list[str]:
    _strict(
        "study", cfg,
        {"g", "noise", "kernel", "t_grid", "replicates", "delta_grid", "seed"},
        {"noise_scales", "b2", "burn_in"},
    )
    study_cfg = ConcentrationStudyConfig(
        g=g_from_dict("study.g", cfg["g"]),
        noise=noise_from_dict("study.noise", cfg["noise"]),
        kernel=_kernel_multi("study.kernel", cfg["kernel"]),
        t_grid=tuple(int(t) for t in cfg["t_grid"]),
        replicates=int(cfg["replicates"]),
        delta_grid=tuple(float(x) for x in cfg["delta_grid"]),
        seed=int(cfg["seed"]),
        noise_scales=tuple(float(s) for s in cfg.get("noise_scales", [1.0])),
        b2=float(cfg.get("b2", 0.0)),
        burn_in=int(cfg.get("burn_in", 1000)),
        threads=threads,
    )
    result = concentration_study(study_cfg)
    tails = os.path.join(out_dir, "concentration.csv")
    write_csv(tails, ["T", "delta", "tail"], result.tail_rows)
    quants = os.path.join(out_dir, "concentration_quantiles.csv")
    write_csv(quants, ["T", "q90", "q99", "reference", "n_samples"], result.summary_rows)
    return [tails, quants]


def _study_mercer(cfg: dict, out_dir: str, threads: int) -> list[str]:
    _strict(
        "study", cfg,
        {"g", "noise", "kernel", "seed"},
        {"sample_size", "thin_gap", "truncation_radius", "truncation_target",
         "truncation_pairs", "beta_m_max", "tail_T", "burn_in"},
    )
    study_cfg = MercerStudyConfig(
        g=g_from_dict("study.g", cfg["g"]),
        noise=noise_from_dict("study.noise", cfg["noise"]),
        kernel=_kernel_scalar("study.kernel", cfg["kernel"]),
        seed=int(cfg["seed"]),
        **{k: cfg[k] for k in (
            "sample_size", "thin_gap", "truncation_radius", "truncation_target",
            "truncation_pairs", "beta_m_max", "tail_T", "burn_in") if k in cfg},
    )
    result = mercer_validation_study(study_cfg)
    paths = []
    for name, rows in (
        ("mercer_reconstruction.csv", result.reconstruction_rows),
        ("mercer_beta.csv", result.beta_rows),
        ("mercer_tail.csv", result.tail_rows),
    ):
        path = os.path.join(out_dir, name)
        write_csv(path, ["k", "value", "bound"], rows)
        paths.append(path)
    for name, ok in result.checks.items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    return paths


def _study_glambda(cfg: dict, out_dir: str, threads: int) -> list[str]:
    _strict(
        "study", cfg,
        {"g", "noise", "kernel", "lambda_grid", "seed", "sample_size", "grid"},
        {"thin_gap", "burn_in"},
    )
    g = g_from_dict("study.g", cfg["g"])
    noise = noise_from_dict("study.noise", cfg["noise"])
    kernel = _kernel_multi("study.kernel", cfg["kernel"])
    p = kernel.input_dim // kernel.d
    sample = stationary_sample(
        g, noise, g.d, p, int(cfg["sample_size"]),
        gap=int(cfg.get("thin_gap", 3)), burn_in=int(cfg.get("burn_in", 1000)),
        seed=int(cfg["seed"]),
    )
    grid = grid_from_dict("study.grid", cfg["grid"], kernel.input_dim)
    result = g_lambda_gap_study(
        g, kernel, tuple(float(x) for x in cfg["lambda_grid"]), sample, grid
    )
    path = os.path.join(out_dir, "glambda.csv")
    write_csv(path, ["lambda", "gap"], result.rows)
    if result.slope is not None:
        print(f"gap_slope={_fmt(result.slope)}")
    return [path]


_STUDY_KINDS = {
    "rate": _study_rate,
    "concentration": _study_concentration,
    "mercer": _study_mercer,
    "glambda": _study_glambda,
}


def cmd_study(args) -> int:
    started = time.time()
    if args.kind not in _STUDY_KINDS:
        raise ConfigError(f"unknown study kind {args.kind!r}; expected one of {sorted(_STUDY_KINDS)}")
    cfg = load_config(args.config)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    outputs = _STUDY_KINDS[args.kind](cfg, out_dir, _threads(args))
    manifest = os.path.join(out_dir, f"{args.kind}_study.manifest.json")
    write_manifest(manifest, f"study {args.kind}", cfg, cfg.get("seed"),
                   [args.config], outputs, started)
    print(f"wrote {', '.join(outputs)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kervar",
        description="Kernel ridge regression for nonlinear VAR time series",
    )
    parser.add_argument("--version", action="version", version=f"kervar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a nonlinear VAR trajectory to CSV")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--out", default=None, help="trajectory CSV path")
    sim.add_argument("--threads", type=int, default=None)
    sim.set_defaults(fn=cmd_simulate)

    fit = sub.add_parser("fit", help="fit the kernel ridge estimator on a trajectory CSV")
    fit.add_argument("--config", required=True)
    fit.add_argument("--out", default=None, help="model JSON path")
    fit.add_argument("--threads", type=int, default=None)
    fit.set_defaults(fn=cmd_fit)

    pred = sub.add_parser("predict", help="evaluate a fitted model on query points")
    pred.add_argument("--model", required=True)
    pred.add_argument("--inputs", required=True, help="CSV with header z1,...,zdp")
    pred.add_argument("--out", default=None, help="predictions CSV path")
    pred.add_argument("--threads", type=int, default=None)
    pred.set_defaults(fn=cmd_predict)

    study = sub.add_parser("study", help="run a desk-scale verification study")
    study.add_argument("--kind", required=True, metavar="{" + ",".join(sorted(_STUDY_KINDS)) + "}")
    study.add_argument("--config", required=True)
    study.add_argument("--out-dir", default=None)
    study.add_argument("--threads", type=int, default=None)
    study.set_defaults(fn=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SimulationDivergedError as err:
        print(f"simulation error: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 4
    except ResourceLimitError as err:
        print(f"resource error: {err}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
