"""Command-line harness: configs, experiment orchestration, CSV emission.

Five subcommands cover the study workflow: derivative verification,
eigenvalue-decay and trace-error tables, moment/MSE estimation,
bound-constrained optimization with warm-started method chains, and
field sampling for the figure pipeline.  Every run writes its fully
resolved configuration plus a manifest with per-file checksums, and
every CSV is byte-reproducible given (config, seed): floats are
printed with 17 significant digits and wall-clock times stay out of
the data files.

Exit codes: 0 success, 2 configuration error, 3 solver or optimizer
failure, 4 derivative-check failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__, control, eig, estimators, fem, hessian, models, prior


class ConfigError(Exception):
    """Bad config file, unknown key, or malformed value."""


class CheckFailure(Exception):
    """A derivative check exceeded its threshold."""


EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CHECK = 4

# key -> default; the default's type is the key's type. "auto" well
# lists expand to the library default layout in the resolved config.
SCHEMA: dict[str, object] = {
    "model.name": "elliptic",
    "mesh.nx": 64,
    "mesh.ny": 32,
    "mesh.lx": 2.0,
    "mesh.ly": 1.0,
    "prior.alpha1": 0.1,
    "prior.alpha2": 20.0,
    "prior.theta11": 1.0,
    "prior.theta12": 0.0,
    "prior.theta22": 1.0,
    "prior.mean": 3.1345,
    "wells.injection": "auto",
    "wells.production": "auto",
    "wells.sigma": 0.05,
    "cost.beta": 1.0,
    "cost.beta-p": 1e-5,
    "cost.z-min": 0.0,
    "cost.z-max": 32.0,
    "cost.z0": 16.0,
    "method.name": "quad-mc",
    "method.n": 25,
    "method.p": 10,
    "method.m": "100",
    "method.k-ref": 140,
    "method.tol": 1e-3,
    "method.max-iter": 100,
    "method.fixed-nominal": False,
    "rng.seed": 314,
    "output.directory": "out",
    "check.negative-control": False,
}

GRAD_TOL = 1e-5
HESS_TOL = 1e-4
ZGRAD_TOL = 1e-4


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def _parse_value(key: str, raw: str):
    default = SCHEMA[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def load_config(path: str | None, overrides: dict[str, object] | None = None) -> dict:
    """Read a flat key=value file over the schema defaults.

    Unknown keys are rejected rather than ignored so a typo cannot
    silently fall back to a default.
    """
    cfg = dict(SCHEMA)
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, raw)
    for key, value in (overrides or {}).items():
        cfg[key] = value
    if cfg["method.name"] not in control.METHODS:
        raise ConfigError(
            f"method.name must be one of {', '.join(control.METHODS)}"
        )
    return cfg


def parse_m_list(cfg: dict) -> list[int]:
    raw = str(cfg["method.m"])
    try:
        ms = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"method.m must be integers, got {raw!r}") from None
    if not ms or any(m < 2 for m in ms):
        raise ConfigError("method.m entries must be >= 2")
    return ms


def _parse_points(raw: str, key: str) -> np.ndarray:
    points = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected x,y pairs separated by ';'")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError(f"{key}: bad coordinate in {chunk!r}") from None
    if not points:
        raise ConfigError(f"{key}: empty point list")
    return np.array(points)


def _points_text(points: np.ndarray) -> str:
    return ";".join(f"{fmt(x)},{fmt(y)}" for x, y in points)


def _toy_model(mesh, mean: float) -> models.QuadraticToyModel:
    """Exactly quadratic stand-in on the mesh's node space.

    Deterministic in the config alone (fixed internal stream): the toy
    data is part of the problem definition, so rng.seed must not move
    it. Twenty controls keep the cost.z0 defaults applicable.
    """
    rng = fem.Rng(2718, 0)
    dim = mesh.n_nodes
    rank = min(12, dim - 1)
    basis = np.linalg.qr(rng.standard_normal(dim * rank).reshape(dim, rank))[0]
    values = 2.0 * np.power(-0.6, np.arange(rank))
    g = 0.5 * (basis @ rng.standard_normal(rank))
    control_map = 0.05 * rng.standard_normal(dim * 20).reshape(dim, 20)
    return models.QuadraticToyModel(
        dim,
        1.5,
        g,
        basis,
        values,
        u_ref=np.full(dim, mean),
        control_map=control_map,
    )


def build_setup(cfg: dict):
    """Mesh, wells, model, and prior from a resolved config."""
    mesh = fem.build_mesh(
        cfg["mesh.nx"], cfg["mesh.ny"], cfg["mesh.lx"], cfg["mesh.ly"]
    )
    default = models.WellConfig.default(cfg["mesh.lx"], cfg["mesh.ly"])
    injection = (
        default.injection
        if cfg["wells.injection"] == "auto"
        else _parse_points(cfg["wells.injection"], "wells.injection")
    )
    production = (
        default.production
        if cfg["wells.production"] == "auto"
        else _parse_points(cfg["wells.production"], "wells.production")
    )
    wells = models.WellConfig(
        injection=injection, production=production, sigma=cfg["wells.sigma"]
    )
    if cfg["model.name"] == "elliptic":
        model = models.EllipticControlModel(mesh, wells)
    elif cfg["model.name"] == "toy":
        model = _toy_model(mesh, cfg["prior.mean"])
    else:
        raise ConfigError(f"model.name: expected elliptic or toy, got {cfg['model.name']!r}")
    pr = prior.build_prior(
        mesh,
        alpha1=cfg["prior.alpha1"],
        alpha2=cfg["prior.alpha2"],
        theta11=cfg["prior.theta11"],
        theta12=cfg["prior.theta12"],
        theta22=cfg["prior.theta22"],
        mean=cfg["prior.mean"],
    )
    # the resolved config records the expanded layout, not "auto"
    cfg["wells.injection"] = _points_text(injection)
    cfg["wells.production"] = _points_text(production)
    return model, pr


def cost_config(cfg: dict, jobs: int, m_samples: int) -> control.CostConfig:
    return control.CostConfig(
        beta=cfg["cost.beta"],
        beta_p=cfg["cost.beta-p"],
        z_min=cfg["cost.z-min"],
        z_max=cfg["cost.z-max"],
        n_eigs=cfg["method.n"],
        oversample=cfg["method.p"],
        m_samples=m_samples,
        tol=cfg["method.tol"],
        max_iter=cfg["method.max-iter"],
        seed=cfg["rng.seed"],
        jobs=jobs,
    )


def start_control(cfg: dict, model) -> np.ndarray:
    return np.full(model.n_controls, cfg["cost.z0"])


def load_control(path: str, n_controls: int) -> np.ndarray:
    try:
        rows = list(csv.reader(Path(path).open(newline="")))
    except OSError as exc:
        raise ConfigError(f"cannot read control file {path}: {exc}") from None
    body = rows[1:] if rows and rows[0] and rows[0][0] == "well" else rows
    try:
        z = np.array([float(row[1]) for row in body if row])
    except (IndexError, ValueError):
        raise ConfigError(f"{path}: expected rows 'well,z'") from None
    if z.shape[0] != n_controls:
        raise ConfigError(
            f"{path}: {z.shape[0]} controls, model has {n_controls}"
        )
    return z


def draw_batch(model, pr, z, count, cfg, jobs):
    if cfg["method.fixed-nominal"]:
        samples = np.repeat(pr.mean[None, :], count, axis=0)
        return estimators.batch_from_samples(model, pr.mean, z, samples, jobs=jobs)
    rng = fem.Rng(cfg["rng.seed"], control.SAMPLE_STREAM)
    return estimators.draw_sample_batch(model, pr, z, count, rng, jobs=jobs)


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])


def write_resolved_config(cfg: dict, out: Path) -> Path:
    lines = [f"{key} = {fmt(cfg[key])}" for key in SCHEMA]
    path = out / "resolved_config.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def write_manifest(command: str, cfg: dict, out: Path, files: list[Path]) -> None:
    resolved = out / "resolved_config.cfg"
    config_hash = hashlib.sha256(resolved.read_bytes()).hexdigest()
    rows = []
    for path in sorted(files, key=lambda p: p.name):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        rows.append(
            (command, config_hash, cfg["rng.seed"], __version__, path.name, digest)
        )
    write_csv(
        out / "manifest.csv",
        ["command", "config_hash", "seed", "version", "file", "sha256"],
        rows,
    )


def _fd_sweep(evaluate, exact: float, steps) -> list[tuple[float, float]]:
    rows = []
    for h in steps:
        fd = evaluate(h)
        rows.append((h, abs(fd - exact) / max(abs(exact), 1e-300)))
    return rows


def cmd_check_derivatives(cfg: dict, out: Path, jobs: int) -> list[Path]:
    model, pr = build_setup(cfg)
    z0 = start_control(cfg, model)
    m_list = parse_m_list(cfg)
    negative = cfg["check.negative-control"]
    lp = hessian.linearize(model, pr.mean, z0)
    rng = fem.Rng(cfg["rng.seed"], 7)
    corrupt = 1.001 if negative else 1.0

    sweep_rows: list[tuple] = []
    summary: list[tuple] = []

    def record(name: str, direction: int, rows, tol: float) -> None:
        best = min(err for _, err in rows)
        sweep_rows.extend((name, direction, h, err) for h, err in rows)
        summary.append((name, direction, best, tol, "pass" if best <= tol else "fail"))

    m_steps = [10.0**-k for k in range(1, 8)]
    for i in range(2):
        d = rng.standard_normal(model.dim_m)
        exact_g = corrupt * float(lp.gbar @ d)

        def grad_fd(h, d=d):
            qp = model.eval_q(model.state_operator(pr.mean + h * d).solve_state(z0))
            qm = model.eval_q(model.state_operator(pr.mean - h * d).solve_state(z0))
            return (qp - qm) / (2.0 * h)

        record("m-gradient", i, _fd_sweep(grad_fd, exact_g, m_steps), GRAD_TOL)

        exact_h = corrupt * float(d @ lp.hess_apply(d))

        def hess_fd(h, d=d):
            gp = hessian.linearize(model, pr.mean + h * d, z0).gbar
            gm = hessian.linearize(model, pr.mean - h * d, z0).gbar
            return float((gp - gm) @ d) / (2.0 * h)

        record("hessian", i, _fd_sweep(hess_fd, exact_h, m_steps[:6]), HESS_TOL)

    batch = draw_batch(model, pr, z0, m_list[0], cfg, jobs)
    z_steps = [10.0**-k for k in range(1, 7)]
    for method in control.METHODS:
        needs_batch = method in ("saa", "lin-mc", "quad-mc")
        ccfg = cost_config(cfg, jobs, m_list[0])
        costgrad = control.make_costgrad(
            model, pr, method, ccfg, batch=batch if needs_batch else None
        )
        dz = rng.standard_normal(model.n_controls)
        _, grad = costgrad(z0)
        exact_z = float(grad @ dz)

        def z_fd(h, costgrad=costgrad, dz=dz):
            jp, _ = costgrad(z0 + h * dz)
            jm, _ = costgrad(z0 - h * dz)
            return (jp - jm) / (2.0 * h)

        record(f"z-gradient-{method}", 0, _fd_sweep(z_fd, exact_z, z_steps), ZGRAD_TOL)

    files = [
        (out / "derivative_checks.csv", ["check", "direction", "step", "error"], sweep_rows),
        (
            out / "derivative_summary.csv",
            ["check", "direction", "min_error", "threshold", "status"],
            summary,
        ),
    ]
    for path, header, rows in files:
        write_csv(path, header, rows)
    if any(row[-1] == "fail" for row in summary):
        raise CheckFailure(
            "; ".join(f"{r[0]}[{r[1]}] min={r[2]:.3e}" for r in summary if r[-1] == "fail")
        )
    return [path for path, _, _ in files]


def cmd_eigdecay(cfg: dict, out: Path, jobs: int, control_path: str | None) -> list[Path]:
    model, pr = build_setup(cfg)
    z = (
        start_control(cfg, model)
        if control_path is None
        else load_control(control_path, model.n_controls)
    )
    lp = hessian.linearize(model, pr.mean, z)
    k_ref = cfg["method.k-ref"]
    pairs = eig.hessian_eigenpairs(
        lp, pr, k_ref, cfg["method.p"], fem.Rng(cfg["rng.seed"], control.EIG_STREAM)
    )
    spectrum = [
        (j + 1, abs(v), 1 if v >= 0 else -1) for j, v in enumerate(pairs.values)
    ]
    errors = eig.trace_error_sweep(pairs.values)
    spectrum_path = out / "spectrum.csv"
    errors_path = out / "trace_errors.csv"
    write_csv(spectrum_path, ["j", "lambda", "sign"], spectrum)
    write_csv(errors_path, ["N", "error1", "error2"], errors)
    return [spectrum_path, errors_path]


def _estimate_rows(model, pr, z, control_id, m_list, cfg, jobs):
    lp = hessian.linearize(model, pr.mean, z)
    rows_mean, rows_var = [], []
    sample_rows, sample_count = [], 0
    for m_count in m_list:
        batch = draw_batch(model, pr, z, m_count, cfg, jobs)
        ms = estimators.mse_summary(lp, batch)
        rows_mean.append(
            (control_id, m_count, ms["e_hat"], ms["mse_q"], ms["mse_q_lin"], ms["mse_q_quad"])
        )
        rows_var.append(
            (control_id, m_count, ms["v_hat"], ms["mse_vq"], ms["mse_vq_lin"], ms["mse_vq_quad"])
        )
        if m_count > sample_count:
            sample_rows, sample_count = _sample_rows(lp, batch), m_count
    return rows_mean, rows_var, sample_rows


def _rel_err(value, approx) -> float:
    """|value - approx| / |value|, nan when the reference is zero."""
    if value == 0.0:
        return float("nan")
    return abs(value - approx) / abs(value)


def _sample_rows(lp, batch):
    """Per-sample integrands plus their relative Taylor errors.

    The error columns live here rather than in the plotting side so
    figures stay free of arithmetic beyond abs and log.
    """
    rows = []
    for i, q, qlin, qquad, v, vlin, vquad in estimators.per_sample_table(lp, batch):
        rows.append(
            (
                i, q, qlin, qquad, v, vlin, vquad,
                _rel_err(q, qlin),
                _rel_err(q, qquad),
                _rel_err(v, vlin),
                _rel_err(v, vquad),
            )
        )
    return rows


MEAN_HEADER = ["control-id", "M", "Ehat", "MSE_Q", "MSE_Q_lin", "MSE_Q_quad"]
VAR_HEADER = ["control-id", "M", "Vhat", "MSE_VQ", "MSE_VQ_lin", "MSE_VQ_quad"]
SAMPLE_HEADER = [
    "i", "Q", "Q_lin", "Q_quad", "q", "q_lin", "q_quad",
    "rel_err_Q_lin", "rel_err_Q_quad", "rel_err_q_lin", "rel_err_q_quad",
]


def cmd_estimate(cfg: dict, out: Path, jobs: int, control_path: str | None) -> list[Path]:
    model, pr = build_setup(cfg)
    if control_path is None:
        z, control_id = start_control(cfg, model), "z0"
    else:
        z, control_id = load_control(control_path, model.n_controls), Path(control_path).stem
    rows_mean, rows_var, sample_rows = _estimate_rows(
        model, pr, z, control_id, parse_m_list(cfg), cfg, jobs
    )
    mean_path = out / "moments_mean.csv"
    var_path = out / "moments_variance.csv"
    samples_path = out / "samples.csv"
    write_csv(mean_path, MEAN_HEADER, rows_mean)
    write_csv(var_path, VAR_HEADER, rows_var)
    write_csv(samples_path, SAMPLE_HEADER, sample_rows)
    return [mean_path, var_path, samples_path]


def cmd_optimize(cfg: dict, out: Path, jobs: int) -> tuple[list[Path], bool]:
    model, pr = build_setup(cfg)
    z0 = start_control(cfg, model)
    m_list = parse_m_list(cfg)
    ccfg = cost_config(cfg, jobs, m_list[0])
    # the fixed-nominal hook must pin the optimizer's samples too, so
    # the batch is drawn here instead of inside the chain
    batch = (
        draw_batch(model, pr, z0, m_list[0], cfg, jobs)
        if cfg["method.fixed-nominal"]
        else None
    )
    stages = control.run_chain(model, pr, cfg["method.name"], z0, ccfg, batch=batch)

    trace_rows = [
        (name, it, j, pg, states, linears)
        for name, tr in stages
        for it, j, pg, states, linears, _ in tr.rows
    ]
    trace_path = out / "trace.csv"
    write_csv(
        trace_path,
        ["stage", "iter", "J", "pg_norm", "state_solves", "linear_solves"],
        trace_rows,
    )
    z_opt = stages[-1][1].z
    control_path = out / "control_opt.csv"
    write_csv(control_path, ["well", "z"], list(enumerate(z_opt)))

    rows_mean, rows_var, sample_rows = _estimate_rows(
        model, pr, z_opt, "z-opt", m_list, cfg, jobs
    )
    post_mean = out / "post_mean.csv"
    post_var = out / "post_variance.csv"
    post_samples = out / "post_samples.csv"
    write_csv(post_mean, MEAN_HEADER, rows_mean)
    write_csv(post_var, VAR_HEADER, rows_var)
    write_csv(post_samples, SAMPLE_HEADER, sample_rows)

    converged = all(tr.converged for _, tr in stages)
    if not converged:
        reasons = {name: tr.reason for name, tr in stages if not tr.converged}
        print(f"optimizer did not converge: {reasons}", file=sys.stderr)
    return [trace_path, control_path, post_mean, post_var, post_samples], converged


def cmd_sample_field(cfg: dict, out: Path, jobs: int) -> list[Path]:
    _, pr = build_setup(cfg)
    coords = pr.mesh.coords
    count = parse_m_list(cfg)[0]
    rng = fem.Rng(cfg["rng.seed"], control.SAMPLE_STREAM)
    samples = pr.sample(rng, count)
    files = []
    mean_path = out / "field_mean.csv"
    write_csv(
        mean_path,
        ["x", "y", "value"],
        zip(coords[:, 0], coords[:, 1], pr.mean),
    )
    files.append(mean_path)
    for i in range(count):
        path = out / f"field_sample_{i:03d}.csv"
        write_csv(
            path, ["x", "y", "value"], zip(coords[:, 0], coords[:, 1], samples[i])
        )
        files.append(path)
    return files


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqctrl",
        description="Risk-averse control experiments: checks, spectra, moments, optimization, fields.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "check-derivatives": "finite-difference sweeps for every analytic derivative",
        "eigdecay": "eigenvalue decay and trace-estimator errors",
        "estimate": "moment and MSE tables at a control",
        "optimize": "run the method chain and report the optimum",
        "sample-field": "export prior mean and samples as CSV grids",
    }
    for name, help_text in specs.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="key=value config file; defaults are the study configuration")
        cmd.add_argument("--seed", type=int, help="override rng.seed")
        cmd.add_argument("--jobs", type=int, default=1, help="worker threads for sample batches")
        cmd.add_argument("--out", help="output directory, overrides output.directory")
        if name in ("eigdecay", "estimate"):
            cmd.add_argument("--control", help="control CSV (well,z); default is z0")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides: dict[str, object] = {}
        if args.seed is not None:
            overrides["rng.seed"] = args.seed
        if args.out is not None:
            overrides["output.directory"] = args.out
        cfg = load_config(args.config, overrides)
        out = Path(cfg["output.directory"])
        out.mkdir(parents=True, exist_ok=True)

        converged = True
        if args.command == "check-derivatives":
            try:
                files = cmd_check_derivatives(cfg, out, args.jobs)
            except CheckFailure as exc:
                # the sweep tables are already on disk for diagnosis
                files = [out / "derivative_checks.csv", out / "derivative_summary.csv"]
                resolved = write_resolved_config(cfg, out)
                write_manifest(args.command, cfg, out, [resolved] + files)
                print(f"derivative checks failed: {exc}", file=sys.stderr)
                return EXIT_CHECK
        elif args.command == "eigdecay":
            files = cmd_eigdecay(cfg, out, args.jobs, args.control)
        elif args.command == "estimate":
            files = cmd_estimate(cfg, out, args.jobs, args.control)
        elif args.command == "optimize":
            files, converged = cmd_optimize(cfg, out, args.jobs)
        else:
            files = cmd_sample_field(cfg, out, args.jobs)

        resolved = write_resolved_config(cfg, out)
        write_manifest(args.command, cfg, out, [resolved] + files)
        return 0 if converged else EXIT_SOLVER
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fem.SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
