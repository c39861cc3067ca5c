"""Command line entry point: ``curvislice <subcommand> --config <path> [--out <dir>] [--seed <n>]``.

Every subcommand writes a deterministic ``<name>.json`` and a separate ``timings.json``.
Exit codes: 0 pass, 1 criterion failure, 2 usage or configuration error.
"""

from __future__ import annotations

import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import click

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads():
    cap = os.environ.get("CURVISLICE_THREADS")
    if cap:
        for var in THREAD_VARS:
            os.environ.setdefault(var, cap)


class ConfigError(click.UsageError):
    pass


def bundled_config(name: str) -> dict:
    text = resources.files("curvislice").joinpath("configs").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def load_config(command: str, path: str | None) -> dict:
    """The bundled config for ``command``, updated by the JSON file at ``path``."""
    cfg = bundled_config(command)
    if path is None:
        return cfg
    p = Path(path)
    try:
        user = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be an object")
    cfg.update(user)
    return cfg


def override(cfg: dict, **flags) -> dict:
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    return cfg


def require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing key {key!r}")
    return cfg[key]


def vector(cfg: dict, key: str, where: str):
    import numpy as np

    val = require(cfg, key, where)
    if isinstance(val, str):
        val = [float(s) for s in val.split(",")]
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected a list of numbers, got {val!r}") from None
    return arr


def positive(cfg: dict, key: str, where: str) -> int:
    val = require(cfg, key, where)
    if not isinstance(val, int) or val <= 0:
        raise ConfigError(f"{where}.{key}: expected a positive integer, got {val!r}")
    return val


def resolve_field(name: str, where: str):
    from .field_core import field_from_name

    try:
        return field_from_name(name)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"{where}.field: {exc}") from None


def resolve_scenario(name: str, where: str):
    from .scenarios import get_scenario

    try:
        return get_scenario(name)
    except KeyError as exc:
        raise ConfigError(f"{where}.scenario: {exc.args[0]}") from None


def dumps(obj) -> str:
    from .acceptance import clean

    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


class Run:
    """Output directory, timings and report writing for one subcommand."""

    def __init__(self, name: str, out: str):
        self.name = name
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()

    def path(self, filename: str) -> Path:
        return self.out / filename

    def finish(self, report: dict, passed: bool = True, extra_times: dict | None = None):
        self.path(f"{self.name}.json").write_text(dumps(report))
        times = {"total_seconds": time.perf_counter() - self.t0} | (extra_times or {})
        self.path("timings.json").write_text(dumps(times))
        click.echo(f"{self.name}: {'pass' if passed else 'FAIL'} -> {self.path(self.name + '.json')}")
        sys.exit(0 if passed else 1)


def _svg(path: Path, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "curvislice"
    fig, ax = plt.subplots(figsize=(5, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="JSON config; keys override the bundled defaults."),
    click.option("--out", default="curvislice_out", show_default=True, help="Output directory."),
    click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed override."),
    click.option("--plot/--no-plot", default=False, help="Also write SVG plots."),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Curvilinear slicing experiments."""
    _cap_threads()


@main.command()
@with_common
@click.option("--field", default=None, help="Field id: euclidean[:n], polar2d, conformal2d:<k>, chartfile:<path>.")
@click.option("--x", default=None, help="Start point, comma separated.")
@click.option("--xi", default=None, help="Initial velocity, comma separated.")
@click.option("--t-end", "t_end", type=float, default=None)
def geodesic(config_path, out, seed, plot, field, x, xi, t_end):
    """Integrate one geodesic and write it as CSV."""
    from .geodesics import integrate

    cfg = override(load_config("geodesic", config_path), field=field, x=x, xi=xi, t_end=t_end, seed=seed)
    run = Run("geodesic", out)
    F = resolve_field(require(cfg, "field", "geodesic"), "geodesic")
    x0, v0 = vector(cfg, "x", "geodesic"), vector(cfg, "xi", "geodesic")
    if len(x0) != F.dim or len(v0) != F.dim:
        raise ConfigError(f"geodesic: x and xi must have length {F.dim}")
    path = integrate(F, x0, v0, float(require(cfg, "t_end", "geodesic")))
    path.to_csv(run.path("geodesic.csv"))
    res = path.ode_residual(F)
    if plot:
        _svg(run.path("geodesic.svg"), lambda ax: (ax.plot(path.points[:, 0], path.points[:, 1]), ax.set_aspect("equal")))
    report = {"config": cfg, "exit_reason": path.exit_reason, "nodes": len(path.t_grid),
              "end_point": path.points[-1], "max_ode_residual": float(res.max(initial=0.0))}
    run.finish(report, path.complete)


@main.command()
@with_common
@click.option("--field", default=None)
@click.option("--x0", default=None, help="Center of the projection ball.")
@click.option("--r0", "R0", type=float, default=None)
def project(config_path, out, seed, plot, field, x0, R0):
    """Fiber coordinates of sample points for a few directions."""
    import numpy as np

    from .projections import make_family
    from .projections import project as do_project

    cfg = override(load_config("project", config_path), field=field, x0=x0, R0=R0, seed=seed)
    run = Run("project", out)
    F = resolve_field(require(cfg, "field", "project"), "project")
    fam = make_family(F, vector(cfg, "x0", "project"), float(require(cfg, "R0", "project")))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    n = F.dim
    count = positive(cfg, "points", "project")
    pts = rng.normal(size=(count, n))
    pts = fam.x0 + fam.R0 * 0.9 * pts / np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(0, 1, (count, 1))
    dirs = rng.normal(size=(count, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fc = do_project(fam, dirs, pts)
    rows = [{"x": p, "xi": d, "y": y, "t": t, "residual": r} for p, d, y, t, r in zip(pts, dirs, fc.y, fc.t, fc.residual)]
    run.finish({"config": cfg, "rows": rows}, bool(np.all(fc.residual < 1e-9)))


@main.command()
@with_common
@click.option("--field", default=None)
@click.option("--x0", default=None)
def transversality(config_path, out, seed, plot, field, x0):
    """Largest dyadic scale at which the projection family is transversal."""
    from .projections import ConstructionFailure, build_family, c2_distance_to_straight, make_family

    cfg = override(load_config("transversality", config_path), field=field, x0=x0, seed=seed)
    run = Run("transversality", out)
    F = resolve_field(require(cfg, "field", "transversality"), "transversality")
    x = vector(cfg, "x0", "transversality")
    samples = positive(cfg, "samples", "transversality")
    try:
        fam = build_family(F, x, n_samples=samples, seed=int(cfg.get("seed", 0)))
    except ConstructionFailure as exc:
        run.finish({"config": cfg, "verdict": "fail", "reason": str(exc.args[0])}, False)
    base = make_family(F, x, 1.0)
    radii = [fam.R0 / 2**k for k in range(int(cfg.get("study_levels", 3)))]
    dist = [c2_distance_to_straight(base.at_scale(r), seed=int(cfg.get("seed", 0))) for r in radii]
    if plot:
        _svg(run.path("transversality.svg"),
             lambda ax: (ax.loglog(radii, dist, "o-"), ax.set_xlabel("r"), ax.set_ylabel("C2 distance")))
    report = {"config": cfg, "R0": fam.R0, "verdict": fam.report.verdict, "C_prime": fam.report.C_prime,
              "patches": [p.to_dict() for p in fam.report.patches], "c2_study": {"radii": radii, "distance": dist}}
    run.finish(report, fam.report.verdict == "pass")


@main.command(name="slice")
@with_common
@click.option("--scenario", default=None)
@click.option("--xi", default=None)
@click.option("--y", default=None)
def slice_cmd(config_path, out, seed, plot, scenario, xi, y):
    """One slice of a scenario, its CSV and detected jumps."""
    import numpy as np

    from .slicing import detect_jumps, slice

    cfg = override(load_config("slice", config_path), scenario=scenario, xi=xi, y=y, seed=seed)
    run = Run("slice", out)
    scn = resolve_scenario(require(cfg, "scenario", "slice"), "slice")
    d = vector(cfg, "xi", "slice")
    d = d / np.linalg.norm(d)
    s = slice(scn.u, scn.gc, scn.family(), d, vector(cfg, "y", "slice"), positive(cfg, "samples", "slice"))
    s.to_csv(run.path("slice.csv"))
    jumps = detect_jumps(s, float(cfg.get("delta", 0.05)), int(cfg.get("window", 5)))
    if plot:
        _svg(run.path("slice.svg"), lambda ax: (ax.plot(s.t_grid[s.domain_mask], s.values[s.domain_mask]),
                                                [ax.axvline(j.t_star, color="r") for j in jumps]))
    run.finish({"config": cfg, "jumps": [j.__dict__ for j in jumps]})


@main.command()
@with_common
@click.option("--scenario", default=None)
@click.option("--p", default=None, help="Exponent, a number or 'inf'.")
@click.option("--kind", type=click.Choice(["zeta", "caratheodory", "favard"]), default=None)
def measure(config_path, out, seed, plot, scenario, p, kind):
    """Jump-measure estimates: zeta_p over the unit ball, the Caratheodory construction, or the Favard measure."""
    import numpy as np

    from . import measures as M

    cfg = override(load_config("measure", config_path), scenario=scenario, p=p, kind=kind, seed=seed)
    run = Run("measure", out)
    scn = resolve_scenario(require(cfg, "scenario", "measure"), "measure")
    try:
        pv = float(require(cfg, "p", "measure"))
    except ValueError:
        raise ConfigError(f"measure.p: expected a number or 'inf', got {cfg['p']!r}") from None
    if not pv >= 1:
        raise ConfigError(f"measure.p: must be >= 1, got {cfg['p']!r}")
    kind = cfg.get("kind", "zeta")
    fam = scn.family()
    if kind == "favard":
        est = M.favard(scn.curve[np.linalg.norm(scn.curve - fam.x0, axis=1) < fam.R0], fam)
        report = est.to_dict()
    else:
        cloud = M.collect_jumps(scn.u, scn.gc, fam, positive(cfg, "directions", "measure"),
                                positive(cfg, "fibers", "measure"))
        if kind == "zeta":
            value = M.zeta(cloud, pv)
            report = {"measure": "zeta", "p": M._p_json(pv), "value": value, "grid": cloud.grid}
        else:
            half = float(cfg.get("box_half", 0.5))
            est = M.caratheodory(cloud, M.Box(fam.x0, half), pv, tuple(cfg.get("depths", (3, 4, 5, 6, 7))))
            report = est.to_dict()
            if plot:
                _svg(run.path("measure.svg"), lambda ax: (ax.bar([str(d) for d in est.depths], est.depth_values),
                                                          ax.set_xlabel("depth")))
    report["config"] = cfg
    run.finish(report)


@main.command()
@with_common
@click.option("--scenario", default=None)
@click.option("--x", default=None)
def osc(config_path, out, seed, plot, scenario, x):
    """Oscillation of the slices at a point over the configured radii."""
    from .oscillation import domination_check, osc_point

    cfg = override(load_config("osc", config_path), scenario=scenario, x=x, seed=seed)
    run = Run("osc", out)
    scn = resolve_scenario(require(cfg, "scenario", "osc"), "osc")
    pt = vector(cfg, "x", "osc")
    radii = [float(r) for r in require(cfg, "radii", "osc")]
    nd = positive(cfg, "directions", "osc")
    rep = osc_point(scn.u, scn.gc, scn.field, pt, radii=radii, n_directions=nd)
    report = {"config": cfg, "osc": rep.to_dict()}
    passed = True
    if cfg.get("domination", False):
        rows = domination_check(scn.u, scn.gc, scn.field, pt, radii=radii, n_directions=nd, seed=int(cfg.get("seed", 0)))
        report["domination"] = [r.__dict__ for r in rows]
        passed = all(r.holds for r in rows)
    if plot:
        _svg(run.path("osc.svg"), lambda ax: (ax.semilogx(rep.radii, rep.osc_values, "o-"), ax.set_xlabel("r")))
    run.finish(report, passed)


@main.command()
@with_common
@click.option("--scenario", default=None)
def gbd(config_path, out, seed, plot, scenario):
    """The GBD inequality on configured balls, with the jump length measure as lambda."""
    import numpy as np

    from . import gbd as G
    from .geodesics import sphere_directions

    cfg = override(load_config("gbd", config_path), scenario=scenario, seed=seed)
    run = Run("gbd", out)
    scn = resolve_scenario(require(cfg, "scenario", "gbd"), "gbd")
    fam = scn.family()
    lam = G.local_curve_measure(scn.curve, fam.x0, 1.1 * fam.R0, int(cfg.get("depth", 14)))
    balls = [(fam.x0 + fam.R0 * np.asarray(c, dtype=float), fam.R0 * float(r))
             for c, r in require(cfg, "balls", "gbd")]
    dirs = sphere_directions(scn.dim, positive(cfg, "directions", "gbd"))
    wit = G.gbd_inequality_check(scn.u, scn.gc, lam, [fam], balls, dirs, positive(cfg, "fibers", "gbd"),
                                 seed=int(cfg.get("seed", 0)))
    if plot:
        _svg(run.path("gbd.svg"), lambda ax: (ax.scatter(lam.points[:, 0], lam.points[:, 1], s=1),
                                              ax.set_aspect("equal")))
    run.finish({"config": cfg, "witness": wit.to_dict(), "lambda_total": lam.total}, wit.passed)


@main.command()
@with_common
@click.option("--scenario", default=None)
@click.option("--x", default=None)
def poincare(config_path, out, seed, plot, scenario, x):
    """Both sides of the weak Poincare inequality at a point over dyadic radii r_x / 2^k."""
    from . import gbd as G
    from .acceptance import POINCARE_FLOOR

    cfg = override(load_config("poincare", config_path), scenario=scenario, x=x, seed=seed)
    run = Run("poincare", out)
    scn = resolve_scenario(require(cfg, "scenario", "poincare"), "poincare")
    pt = vector(cfg, "x", "poincare")
    est = G.find_r_x(scn.field, pt)
    radii = [est.r_x / 2**k for k in range(positive(cfg, "levels", "poincare"))]
    lam = G.local_curve_measure(scn.curve, pt, 2 * G.THETA_RADIUS, int(cfg.get("depth", 23)))
    rep = G.poincare_experiment(scn.u, lam, scn.field, pt, radii, per_unit=positive(cfg, "per_unit", "poincare"))
    if plot and rep.rows:
        _svg(run.path("poincare.svg"), lambda ax: (
            ax.loglog(radii, [max(r.lhs_sup, POINCARE_FLOOR) for r in rep.rows], "o-", label="sup |e(a_r)|"),
            ax.loglog(radii, [max(r.rhs, POINCARE_FLOOR) for r in rep.rows], "s-", label="lambda_r(B1)/r^(n-1)"),
            ax.legend()))
    run.finish({"config": cfg, "r_x": est.r_x, "report": rep.to_dict()})


@main.command()
@with_common
@click.option("--only", default=None, help="Comma separated criterion numbers (no determinism rerun).")
def suite(config_path, out, seed, plot, only):
    """Run every acceptance criterion; exit 0 only if all pass."""
    from . import acceptance as A

    cfg = override(load_config("suite", config_path), seed=seed)
    run = Run("suite", out)
    cfg = A.merge_config(cfg)
    if only:
        try:
            wanted = {int(k) for k in only.split(",")}
        except ValueError:
            raise ConfigError(f"--only: expected comma separated integers, got {only!r}") from None
        results, times = A.run_criteria(cfg, wanted)
        times = {"first_pass": times}
    else:
        results, times = A.run_suite(cfg)
    for r in results:
        click.echo(r.line())
    passed = all(r.passed for r in results)
    report = {"criteria": [r.to_dict() for r in results], "passed": passed}
    run.finish(report, passed, {"criteria": times})


if __name__ == "__main__":
    main()
