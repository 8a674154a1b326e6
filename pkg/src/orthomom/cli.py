"""Command-line interface: trees, psi, verify, estimate, simulate."""

from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import engine, estimation, models, simulation, trees, verification


def _echo_csv(rows, header) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    click.echo(buf.getvalue(), nl=False)


def _parse_floats(text: str) -> tuple[float, ...]:
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _read_observations(path: str) -> list[tuple]:
    p = Path(path)
    if p.suffix.lower() == ".json":
        data = json.loads(p.read_text())
        return [tuple(float(v) for v in row) for row in data]
    rows = []
    with open(p, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append(tuple(float(v) for v in row))
            except ValueError:
                continue  # header line
    return rows


def _resolve_model(name: str, d_eta: int | None = None) -> models.ModelSpec:
    if name in verification.FIXTURE_NAMES:
        model, _ = verification.get_fixture(name)
        return model
    kwargs = {}
    if name == "heterocoef" and d_eta is not None:
        kwargs["d_eta"] = d_eta
    return models.get_model(name, **kwargs)


@click.group()
def main():
    """Construction, certification, and estimation with higher-order
    orthogonal moment functions."""


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------


@main.group(name="trees")
def trees_group():
    """Rooted-tree enumeration and coefficients."""


def _tree_rows(q: int, cap: int, subset):
    rows = []
    for tree in subset:
        c = trees.coefficient(q, tree)
        rows.append(
            (
                tree.encoding,
                tree.size,
                tree.d,
                tree.aut,
                c.numerator,
                c.denominator,
            )
        )
    return rows


_TREE_HEADER = ("canonical_encoding", "size", "d", "aut", "coeff_num", "coeff_den")


@trees_group.command("enumerate")
@click.option("--q", type=int, required=True)
@click.option("--cap", type=int, default=trees.DEFAULT_ENUMERATION_CAP, show_default=True)
def trees_enumerate(q: int, cap: int):
    """List every tree with d <= q, with invariants and coefficients."""
    subset = trees.enumerate_trees(q, cap=cap)
    _echo_csv(_tree_rows(q, cap, subset), _TREE_HEADER)


@trees_group.command("coeffs")
@click.option("--q", type=int, required=True)
@click.option("--cap", type=int, default=trees.DEFAULT_ENUMERATION_CAP, show_default=True)
@click.option("--affine-only", is_flag=True, help="Restrict to trees with size == d.")
def trees_coeffs(q: int, cap: int, affine_only: bool):
    """Exact rational coefficients of the order-q moment function."""
    subset = trees.affine_trees(q, cap=cap) if affine_only else trees.enumerate_trees(q, cap=cap)
    _echo_csv(_tree_rows(q, cap, subset), _TREE_HEADER)


# ---------------------------------------------------------------------------
# psi
# ---------------------------------------------------------------------------


@main.group(name="psi")
def psi_group():
    """Inspect and evaluate assembled moment functions."""


@psi_group.command("show")
@click.option("--q", type=int, required=True)
@click.option("--affine", is_flag=True)
def psi_show(q: int, affine: bool):
    """Term list: tree encoding, coefficient, copies used by the term."""
    subset = trees.affine_trees(q) if affine else trees.enumerate_trees(q)
    rows = []
    for tree in subset:
        c = trees.coefficient(q, tree)
        rows.append(
            (tree.encoding, c.numerator, c.denominator, 1 + tree.size)
        )
    _echo_csv(rows, ("canonical_encoding", "coeff_num", "coeff_den", "copies"))


@psi_group.command("eval")
@click.option("--q", type=int, required=True)
@click.option("--model", "model_name", required=True)
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--theta", default="0", show_default=True)
@click.option("--eta", required=True)
@click.option("--lam", required=True)
@click.option("--affine", is_flag=True)
def psi_eval(q, model_name, input_path, theta, eta, lam, affine):
    """Evaluate psi on observations read from a CSV/JSON file (debugging)."""
    model = _resolve_model(model_name)
    psi = (
        engine.assemble_psi_affine(q, model)
        if affine
        else engine.assemble_psi(q, model)
    )
    copies = _read_observations(input_path)
    if len(copies) < psi.copies_required:
        raise click.ClickException(
            f"need {psi.copies_required} observations, file has {len(copies)}"
        )
    value = psi.evaluate(
        copies, _parse_floats(theta), _parse_floats(eta), _parse_floats(lam)
    )
    click.echo(
        json.dumps(
            {
                "q": q,
                "model": model.name,
                "copies_required": psi.copies_required,
                "n_terms": len(psi.terms),
                "value": float(value),
            },
            sort_keys=True,
        )
    )


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


@main.group(name="verify")
def verify_group():
    """Numerical certification of orthogonality and the combinatorial lemmas."""


@verify_group.command("ortho")
@click.option("--model", "model_name", required=True,
              help="Fixture name or built-in model name.")
@click.option("--dgp", "dgp_name", default="fixture", show_default=True,
              help="'fixture' (paired with the model), a fixture name, or a JSON path.")
@click.option("--q", type=int, required=True)
@click.option("--check-order", type=int, default=None)
@click.option("--affine-only", is_flag=True)
@click.option("--pass-tol", type=float, default=1e-7, show_default=True)
@click.option("--fail-tol", type=float, default=1e-3, show_default=True)
def verify_ortho(model_name, dgp_name, q, check_order, affine_only, pass_tol, fail_tol):
    """Derivative report of the population moment at the truth (JSON)."""
    if model_name in verification.FIXTURE_NAMES:
        model, dgp = verification.get_fixture(model_name)
    else:
        model = _resolve_model(model_name)
        dgp = None
    if dgp_name != "fixture":
        if dgp_name in verification.FIXTURE_NAMES:
            _, dgp = verification.get_fixture(dgp_name)
        else:
            dgp = verification.load_dgp(dgp_name)
    if dgp is None:
        raise click.ClickException(
            "no distribution: pass --dgp <fixture|file.json> for built-in models"
        )
    report = verification.orthogonality_check(
        model,
        dgp,
        q,
        check_order=check_order,
        affine_only=affine_only,
        pass_tol=pass_tol,
        fail_tol=fail_tol,
    )
    click.echo(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    sys.exit(0 if report.passed else 1)


@verify_group.command("lemmas")
@click.option("--cases", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def verify_lemmas(cases: int, seed: int):
    """Randomized brute-force checks of the two combinatorial identities."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    comp_zero = comp_sign = hockey = 0
    for _ in range(cases):
        q = int(rng.integers(1, 9))
        r = int(rng.integers(1, max(2, q)))
        # condition (i): some c positive, sum c + r <= q
        budget = q - r
        cs = [0] * r
        if budget > 0:
            extra = int(rng.integers(1, budget + 1))
            for _ in range(extra):
                cs[int(rng.integers(0, r))] += 1
        if sum(cs) >= 1:
            s = verification.composition_sum_oracle(cs, q)
            comp_zero += int(s == 0)
        else:
            comp_zero += 1  # degenerate draw; counted as vacuous
        s0 = verification.composition_sum_oracle([0] * r, q)
        comp_sign += int(s0 == (-1) ** r)
    for _ in range(cases):
        n = int(rng.integers(1, 4))
        a = [int(rng.integers(0, 5)) for _ in range(n)]
        M = int(rng.integers(0, 13))
        brute, closed = verification.hockey_stick_oracle(a, M)
        hockey += int(brute == closed)
    payload = {
        "cases": cases,
        "seed": seed,
        "composition_sum_zero_ok": comp_zero,
        "composition_sum_sign_ok": comp_sign,
        "hockey_stick_ok": hockey,
        "passed": comp_zero == cases and comp_sign == cases and hockey == cases,
    }
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
    sys.exit(0 if payload["passed"] else 1)


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


@main.command("estimate")
@click.option("--model", "model_name", default="heterocoef", show_default=True)
@click.option("--q", type=int, default=2, show_default=True)
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--target", default="mean", show_default=True,
              type=click.Choice(["mean", "second_moment"]))
@click.option("--component", type=int, default=0, show_default=True)
@click.option("--split", default="loo", show_default=True,
              type=click.Choice(["loo", "halves"]))
@click.option("--cross-fit", is_flag=True)
@click.option("--regularize", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-tuples", type=int, default=1_000_000, show_default=True)
def estimate_cmd(
    model_name, q, input_path, target, component, split, cross_fit, regularize,
    seed, max_tuples,
):
    """Estimate the target from long-format panel data (unit, t, y, x1..xk)."""
    rows = []
    with open(input_path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                continue
    est = estimation.PanelMomentEstimator(
        model=model_name,
        q=q,
        target=target,
        component=component,
        split=split,
        cross_fit=cross_fit,
        regularize=regularize,
        seed=seed,
        max_tuples=max_tuples,
    ).fit(np.asarray(rows))
    payload = {
        "model": est.model_.name,
        "q": q,
        "target": target,
        "component": component,
        "theta_hat": est.theta_,
        "n_units": int(est.unit_values_.size),
        "n_excluded": est.n_excluded_,
        "unit_values": [
            None if not np.isfinite(v) else float(v) for v in est.unit_values_
        ],
    }
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


@main.group(name="simulate")
def simulate_group():
    """Monte Carlo studies."""


@simulate_group.command("klinerose")
@click.option("--n", "--N", "n_units", type=int, default=1000, show_default=True)
@click.option("--t-grid", "--T-grid", "t_grid", default="20,40,60,80,100",
              show_default=True)
@click.option("--reps", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--full-scale", is_flag=True, help="Replication count 1000.")
@click.option("--estimators", default="ols,orth2", show_default=True)
@click.option("--regularization", default="none,dirichlet-eb", show_default=True)
def simulate_klinerose(
    n_units, t_grid, reps, seed, out_dir, workers, full_scale, estimators,
    regularization,
):
    """Grouped callback-design study; writes results.csv and summary.json."""
    cfg = simulation.SimConfig(
        N=n_units,
        T_grid=tuple(int(v) for v in t_grid.split(",")),
        reps=1000 if full_scale else reps,
        seed=seed,
        estimators=tuple(estimators.split(",")),
        regularizations=tuple(regularization.split(",")),
    )
    result = simulation.run_study(cfg, workers=workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    simulation.write_results_csv(result, out / "results.csv")
    simulation.write_summary_json(result, out / "summary.json")
    click.echo(f"wrote {out / 'results.csv'} and {out / 'summary.json'}")


@simulate_group.command("neyman-scott")
@click.option("--q", type=int, default=2, show_default=True)
@click.option("--n", "--N", "n_units", type=int, default=500, show_default=True)
@click.option("--t", "--T", "n_obs", type=int, default=10, show_default=True)
@click.option("--reps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--m", "m_spec", default="poly:0,0,1", show_default=True,
              help="Target as poly:c0,c1,... (coefficients in ascending order).")
def simulate_neyman_scott(q, n_units, n_obs, reps, seed, m_spec):
    """Normal-means demonstrator: plug-in vs order-q orthogonal estimation."""
    if not m_spec.startswith("poly:"):
        raise click.ClickException("--m must look like poly:c0,c1,...")
    coeffs = [float(v) for v in m_spec[len("poly:"):].split(",")]
    m = models.Polynomial(coeffs)
    rows = simulation.neyman_scott_demo(
        m, q=q, N=n_units, T=n_obs, seed=seed, reps=reps
    )
    click.echo(json.dumps(rows, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
