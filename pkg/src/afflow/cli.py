"""Command line front end. Exit codes: 0 pass, 2 precondition failure,
3 internal bound violation or failed postcheck."""

import json
import sys

import click

from . import correction as cr
from . import harness as hs
from .errors import AfflowError, PreconditionError


def _config(delta, trials, seed, grid, window):
    return cr.FixConfig(delta_admissible=delta, trials=trials, seed=seed, grid_points=grid,
                        window_rule=window)


def _common(f):
    f = click.option("--delta-adm", "delta", type=float, default=cr.DEFAULT_CONFIG.delta_admissible,
                     show_default=True, help="admissible defect threshold")(f)
    f = click.option("--trials", type=int, default=256, show_default=True,
                     help="samples for defect lower bounds")(f)
    f = click.option("--grid", "grid", type=int, default=65, show_default=True,
                     help="time grid points on [0, 1]")(f)
    f = click.option("--window-rule", "window", type=click.Choice(["max", "energy", "default"]),
                     default="max", show_default=True,
                     help="spectral window width in the doubled driver")(f)
    return f


def _finish(report, out):
    if out:
        hs.save_json(report, out)
    summary = {k: report.get(k) for k in ("mode", "pass", "metrics", "seconds", "error")
               if k in report}
    click.echo(json.dumps(hs._jsonable(summary), indent=1))
    sys.exit(report.get("exit_code", 0 if report.get("pass") else 3))


def _load_instance(path):
    try:
        return hs.Instance.from_json(hs.load_json(path))
    except AfflowError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(2)


@click.group()
def main():
    """Make approximately invariant inner flows exactly invariant on towers."""


@main.command()
@click.option("--n", type=int, required=True)
@click.option("--tower", required=True, help="comma separated factor sizes, e.g. 2,2,2")
@click.option("--eta", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fixed-levels", type=int, default=0, show_default=True,
              help="drop the level generators of the first k levels")
@click.option("-o", "--output", required=True, type=click.Path())
def gen(n, tower, eta, seed, fixed_levels, output):
    """Generate a seeded instance."""
    try:
        inst = hs.gen_instance(n, tower, eta, seed, fixed_levels)
    except PreconditionError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(2)
    hs.save_json(inst.to_json(), output)
    click.echo(f"wrote {output} (digest {inst.digest})")


@main.command("fix-tower")
@click.argument("instance", type=click.Path())
@click.option("-o", "--output", type=click.Path())
@_common
def fix_tower(instance, output, delta, trials, grid, window):
    """Fix every level of the instance tower."""
    inst = _load_instance(instance)
    _finish(hs.run(inst, _config(delta, trials, inst.seed, grid, window), "tower"), output)


@main.command("fix-prop-a")
@click.argument("instance", type=click.Path())
@click.option("--block", type=int, required=True, help="K for B = M_K ⊗ 1 in the instance frame")
@click.option("-o", "--output", type=click.Path())
@_common
def fix_prop_a(instance, block, output, delta, trials, grid, window):
    """Fix a single factor M_K ⊗ 1."""
    inst = _load_instance(instance)
    try:
        inst.block(block)
    except PreconditionError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(2)
    _finish(hs.run(inst, _config(delta, trials, inst.seed, grid, window), "prop_a", block=block), output)


@main.command("fix-pointwise")
@click.argument("instance", type=click.Path())
@click.option("--level", type=int, required=True)
@click.option("-o", "--output", type=click.Path())
@_common
def fix_pointwise(instance, level, output, delta, trials, grid, window):
    """Make the flow trivial on one tower level."""
    inst = _load_instance(instance)
    if not 1 <= level <= len(inst.tower_spec):
        click.echo(json.dumps({"message": "level out of range", "level": level}), err=True)
        sys.exit(2)
    _finish(hs.run(inst, _config(delta, trials, inst.seed, grid, window), "pointwise", level=level),
            output)


@main.command()
@click.argument("report", type=click.Path())
@click.option("--grid", type=int, default=129, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("-o", "--output", type=click.Path())
def verify(report, grid, seed, output):
    """Re-check a report on a finer grid with fresh seeds."""
    try:
        res = hs.verify(hs.load_json(report), grid, seed)
    except AfflowError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(2)
    if output:
        hs.save_json(res, output)
    click.echo(json.dumps(hs._jsonable(res), indent=1))
    sys.exit(res["exit_code"])


@main.command()
@click.option("--etas", default="1e-1,1e-2,1e-3,1e-4", show_default=True)
@click.option("--n", type=int, default=8, show_default=True)
@click.option("--tower", default="2,2,2", show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--mode", type=click.Choice(["tower", "prop_a", "pointwise"]), default="tower",
              show_default=True)
@click.option("--block", type=int, default=None)
@click.option("--level", type=int, default=None)
@click.option("--fixed-levels", type=int, default=0)
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--plot", "plot_path", type=click.Path(), default=None,
              help="also write a PNG of the metrics against eta")
@_common
def sweep(etas, n, tower, seed, mode, block, level, fixed_levels, csv_path, plot_path,
          delta, trials, grid, window):
    """Run matched-seed instances over a list of eta values."""
    values = [float(e) for e in etas.split(",") if e.strip()]
    cfg = _config(delta, trials, seed, grid, window)
    if mode == "pointwise" and level is None:
        level = 1
    if mode == "pointwise" and fixed_levels == 0:
        fixed_levels = level
    if mode == "prop_a" and block is None:
        block = hs.parse_tower(tower)[0]
    try:
        rows, reports = hs.sweep(values, n, tower, seed, cfg, mode, block, level, fixed_levels)
    except PreconditionError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(2)
    hs.write_csv(rows, csv_path)
    if plot_path:
        from .plotting import plot_sweep

        plot_sweep(rows, plot_path)
    for rep in reports:
        status = "pass" if rep["pass"] else f"fail ({rep.get('error', {}).get('error', 'postcheck')})"
        click.echo(f"eta={rep['instance']['eta']:g}: {status}")
    codes = [rep["exit_code"] for rep in reports]
    sys.exit(max(codes) if codes else 0)


if __name__ == "__main__":
    main()
