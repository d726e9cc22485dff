"""Command-line front end.

Every command is a thin wrapper over one module operation: load inputs,
call the operation, write a report or a CSV table. All randomness is
controlled by --seed, outputs carry no timestamps, and errors exit
nonzero with a single "error: ..." line on stderr.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import click

from . import __version__
from .allocator import (
    ConstraintSet,
    GridSpec,
    InfeasibleSearchError,
    axis_candidates,
    chin_model,
    constrained_search,
    isoflop_slice,
    nqs_model,
)
from .chinchilla import ChinFitConfig, ChinParams, chin_fit, chin_loss, chin_optimal_nd
from .core import nqs_loss, nqs_loss_layernorm
from .data import DatasetFormatError, ScalingDataset, load_dataset
from .fitting import FitConfig, anchor_s_grid, bootstrap_ci, fit_nqs, select_s
from .numerics import NumericsError
from .params import LayerNormConfig, NqsParams, RunConfig, UnstableDynamicsError
from .report import ReportError, load_params, load_report, save_report
from .simulator import (
    DatasetDesign,
    SimConfig,
    generate_synthetic_dataset,
    simulate_layernorm_run,
    simulate_run,
)

_ERRORS = (
    ValueError,
    OSError,
    DatasetFormatError,
    ReportError,
    NumericsError,
    UnstableDynamicsError,
    InfeasibleSearchError,
)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def parse_flops(text: str) -> float:
    """Parse a FLOP count; a PF suffix means petaflops (1e15)."""
    t = text.strip()
    if t.upper().endswith("PF"):
        return float(t[:-2]) * 1e15
    return float(t)


def _write_table(path: Optional[str], header: Sequence[str], rows) -> None:
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    finally:
        if path:
            out.close()


def _default_threads() -> Optional[int]:
    env = os.environ.get("NQS_THREADS")
    return int(env) if env else None


def _apply_config_file(ctx, cfg, path: Optional[str], flag_map):
    """Overlay a JSON config file, keeping explicitly typed CLI flags on top."""
    if not path:
        return cfg
    with open(path) as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid config JSON: {exc}") from None
    if not isinstance(overrides, dict):
        raise ValueError(f"{path} must hold a JSON object of config fields")
    from click.core import ParameterSource

    updates = {}
    for field, value in overrides.items():
        if field not in flag_map:
            raise ValueError(f"unknown config field {field!r} in {path}")
        flag = flag_map[field]
        if flag is not None and ctx.get_parameter_source(flag) == ParameterSource.COMMANDLINE:
            continue  # explicit flag wins over the file
        updates[field] = value
    return replace(cfg, **updates) if updates else cfg


def _parse_theta(text: str) -> NqsParams:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 7:
        raise ValueError("theta needs 7 comma-separated values: p,P,q,Q,r,R,e_irr")
    return NqsParams(*parts)


@click.group()
@click.version_option(__version__, prog_name="nqs")
def main():
    """Loss modeling for pre-training runs: fit, predict, allocate, simulate."""


@main.command("fit")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file of FitConfig fields; explicit flags override it.")
@click.option("--seed", default=0, show_default=True)
@click.option("--inits", default=1000, show_default=True)
@click.option("--iters", default=5000, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--objective", type=click.Choice(["huber", "mse"]), default="huber",
              show_default=True)
@click.option("--huber-delta", default=1e-3, show_default=True)
@click.option("--clip", default=1.0, show_default=True)
@click.option("--small-batch-margin", default=0.05, show_default=True)
@click.option("--small-batch-data", type=click.Path(exists=True, dir_okay=False),
              help="Dataset for the s grid search; defaults to the records the "
                   "small-batch filter removed from --data.")
@click.option("--s-grid", help="Comma-separated s candidates; defaults to the "
                               "anchor grid when s selection runs.")
@click.option("--threads", type=int, default=None,
              help="Fit worker threads; defaults to NQS_THREADS or 1.")
@click.pass_context
@_guarded
def fit_cmd(ctx, data, out, config_path, seed, inits, iters, lr, objective,
            huber_delta, clip, small_batch_margin, small_batch_data, s_grid, threads):
    """Fit the 7-parameter loss model and optionally select s."""
    cfg = FitConfig(
        n_inits=inits, n_iters=iters, lr=lr, objective=objective,
        huber_delta=huber_delta, clip=clip, seed=seed,
        small_batch_margin=small_batch_margin,
        threads=threads if threads is not None else _default_threads(),
    )
    cfg = _apply_config_file(ctx, cfg, config_path, {
        "n_inits": "inits", "n_iters": "iters", "lr": "lr", "objective": "objective",
        "huber_delta": "huber_delta", "clip": "clip", "seed": "seed",
        "small_batch_margin": "small_batch_margin", "penalty": None,
        "beta1": None, "beta2": None, "adam_eps": None,
    })
    dataset = load_dataset(data)
    rep = fit_nqs(dataset, cfg)

    if s_grid or small_batch_data:
        if small_batch_data:
            s_data = load_dataset(small_batch_data)
        else:
            s_data = ScalingDataset(tuple(dataset[i] for i in rep.filtered_indices))
        if len(s_data) == 0:
            raise ValueError(
                "s selection requested but there are no small-batch records; "
                "pass --small-batch-data"
            )
        if s_grid:
            grid = [float(x) for x in s_grid.split(",")]
        else:
            grid = anchor_s_grid(max(r.n_params for r in s_data)).tolist()
        s_star, curve = select_s(rep.theta, s_data, grid)
        rep = replace(rep, selected_s=s_star, s_curve=curve)

    save_report(rep.to_dict(), out)
    click.echo(f"fit objective {rep.objective!r} using {rep.n_records_used} records "
               f"({rep.backend} backend); report written to {out}")


@main.command("predict")
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_params", required=True, type=int)
@click.option("--batch", required=True, type=int)
@click.option("--steps", required=True, type=int)
@click.option("--seq-len", default=1, show_default=True)
@click.option("--use-s", is_flag=True,
              help="Predict through norm feedback with the report's selected s.")
@_guarded
def predict_cmd(report_path, n_params, batch, steps, seq_len, use_s):
    """Predicted loss for one configuration, printed at full precision."""
    params = load_params(report_path)
    run = RunConfig(n_params=n_params, batch=batch, steps=steps, seq_len=seq_len)
    if isinstance(params, ChinParams):
        if use_s:
            raise ValueError("--use-s applies only to reports of the main model")
        loss = chin_loss(params, run.n_params, max(1, run.tokens))
    elif use_s:
        doc = load_report(report_path)
        if "selected_s" not in doc:
            raise ValueError("--use-s needs a report with a selected s")
        ln = LayerNormConfig(s=float(doc["selected_s"]))
        loss = nqs_loss_layernorm(params, run, ln)
    else:
        loss = nqs_loss(params, run)
    click.echo(repr(loss))


def _constraints_from_flags(compute_max, time_max, memory_max, data_max, seq_len,
                            time_rule) -> ConstraintSet:
    return ConstraintSet(
        compute_max=parse_flops(compute_max),
        time_max=float(time_max) if time_max is not None else None,
        memory_max=float(memory_max) if memory_max is not None else None,
        data_max=float(data_max) if data_max is not None else None,
        seq_len=seq_len,
        time_rule=time_rule,
    )


def _model_from_report(report_path: str, use_s: bool):
    params = load_params(report_path)
    if isinstance(params, ChinParams):
        if use_s:
            raise ValueError("--use-s applies only to reports of the main model")
        return chin_model(params)
    ln = None
    if use_s:
        doc = load_report(report_path)
        if "selected_s" not in doc:
            raise ValueError("--use-s needs a report with a selected s")
        ln = LayerNormConfig(s=float(doc["selected_s"]))
    return nqs_model(params, ln)


@main.command("allocate")
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--compute-max", required=True,
              help="FLOP budget; accepts a PF suffix (236PF = 2.36e17).")
@click.option("--time-max", default=None)
@click.option("--memory-max", default=None)
@click.option("--data-max", default=None)
@click.option("--time-rule", type=click.Choice(["nk", "steps"]), default="nk",
              show_default=True)
@click.option("--seq-len", default=1, show_default=True)
@click.option("--n-lo", default=1e3, show_default=True)
@click.option("--n-hi", default=1e9, show_default=True)
@click.option("--b-lo", default=1.0, show_default=True)
@click.option("--b-hi", default=4096.0, show_default=True)
@click.option("--k-lo", default=1.0, show_default=True)
@click.option("--k-hi", default=1e6, show_default=True)
@click.option("--points-per-decade", default=16, show_default=True)
@click.option("--use-s", is_flag=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path; default stdout.")
@_guarded
def allocate_cmd(report_path, compute_max, time_max, memory_max, data_max, time_rule,
                 seq_len, n_lo, n_hi, b_lo, b_hi, k_lo, k_hi, points_per_decade,
                 use_s, out):
    """Best (n_params, batch, steps) under the given resource ceilings."""
    cons = _constraints_from_flags(compute_max, time_max, memory_max, data_max,
                                   seq_len, time_rule)
    grid = GridSpec(n_bounds=(n_lo, n_hi), b_bounds=(b_lo, b_hi),
                    k_bounds=(k_lo, k_hi), points_per_decade=points_per_decade)
    model = _model_from_report(report_path, use_s)
    res = constrained_search(model, cons, grid)
    _write_table(out, ["n_params", "batch", "steps", "seq_len", "loss", "n_feasible"],
                 [[res.config.n_params, res.config.batch, res.config.steps,
                   res.config.seq_len, res.loss, res.n_feasible]])


@main.command("isoflop")
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--compute", required=True, help="Budget; accepts a PF suffix.")
@click.option("--seq-len", default=1, show_default=True)
@click.option("--n-lo", default=1e3, show_default=True)
@click.option("--n-hi", default=1e9, show_default=True)
@click.option("--points-per-decade", default=16, show_default=True)
@click.option("--batch-rule", default=None,
              help="'fixed:<B>' or 'cbs:<b0>,<alpha>,<d_ref>'; without it batch "
                   "is chosen per size from the --b-lo/--b-hi grid.")
@click.option("--b-lo", default=1.0, show_default=True)
@click.option("--b-hi", default=4096.0, show_default=True)
@click.option("--time-max", default=None)
@click.option("--memory-max", default=None)
@click.option("--data-max", default=None)
@click.option("--time-rule", type=click.Choice(["nk", "steps"]), default="nk",
              show_default=True)
@click.option("--use-s", is_flag=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path; default stdout.")
@_guarded
def isoflop_cmd(report_path, compute, seq_len, n_lo, n_hi, points_per_decade,
                batch_rule, b_lo, b_hi, time_max, memory_max, data_max, time_rule,
                use_s, out):
    """Loss along one fixed-compute curve, one CSV row per model size."""
    budget = parse_flops(compute)
    cons = _constraints_from_flags(compute, time_max, memory_max, data_max,
                                   seq_len, time_rule)
    model = _model_from_report(report_path, use_s)
    n_cand = axis_candidates(n_lo, n_hi, points_per_decade)
    b_cand = None if batch_rule else axis_candidates(b_lo, b_hi, points_per_decade)
    rows, skipped = isoflop_slice(model, budget, cons, n_cand,
                                  b_candidates=b_cand, batch_rule=batch_rule)
    for n, reason in skipped:
        click.echo(f"note: n_params={n} skipped ({reason})", err=True)
    _write_table(out, ["n_params", "batch", "steps", "loss"],
                 [[r.n_params, r.batch, r.steps, r.loss] for r in rows])


@main.command("simulate")
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n_params", required=True, type=int)
@click.option("--batch", required=True, type=int)
@click.option("--steps", required=True, type=int)
@click.option("--seq-len", default=1, show_default=True)
@click.option("--trials", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--s", "s_value", type=float, default=None,
              help="Turn on normalization feedback with this constant mass.")
@click.option("--feedback", type=click.Choice(["oracle", "empirical"]),
              default="oracle", show_default=True)
@click.option("--gamma-init", default=1.0, show_default=True)
@click.option("--latent-modes", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path; default stdout.")
@_guarded
def simulate_cmd(report_path, n_params, batch, steps, seq_len, trials, seed, s_value,
                 feedback, gamma_init, latent_modes, out):
    """Monte-Carlo trials of one run; reports loss and norm statistics."""
    params = load_params(report_path)
    if not isinstance(params, NqsParams):
        raise ValueError("simulate needs a report of the main model")
    run = RunConfig(n_params=n_params, batch=batch, steps=steps, seq_len=seq_len)
    ln = None
    if s_value is not None:
        ln = LayerNormConfig(s=s_value, gamma_init=gamma_init)
    cfg = SimConfig(theta=params, run=run, trials=trials, seed=seed, ln=ln,
                    feedback=feedback, latent_modes=latent_modes)
    res = simulate_layernorm_run(cfg) if ln is not None else simulate_run(cfg)
    _write_table(out, ["loss_mean", "loss_stderr", "norm_mean", "norm_stderr", "trials"],
                 [[res.loss_mean, res.loss_stderr, res.norm_mean, res.norm_stderr,
                   res.trials]])


@main.command("generate")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--design", type=click.Choice(["isoflops", "isotokens", "both"]),
              default="both", show_default=True)
@click.option("--theta", "theta_text", default=None,
              help="Generator parameters p,P,q,Q,r,R,e_irr.")
@click.option("--report", "report_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Take the generator parameters from a fit report instead.")
@click.option("--levels", default=9, show_default=True)
@click.option("--models-per-level", default=8, show_default=True)
@click.option("--train-levels", default=6, show_default=True)
@click.option("--seq-len", default=512, show_default=True)
@click.option("--batch-rule", default="cbs:64,0.35,1e8", show_default=True)
@click.option("--base-compute", default="1e13", show_default=True,
              help="Smallest level's budget; accepts a PF suffix.")
@click.option("--noise-sd", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guarded
def generate_cmd(out, design, theta_text, report_path, levels, models_per_level,
                 train_levels, seq_len, batch_rule, base_compute, noise_sd, seed):
    """Write a synthetic scaling dataset drawn from known parameters."""
    if (theta_text is None) == (report_path is None):
        raise ValueError("pass exactly one of --theta or --report")
    if theta_text is not None:
        theta = _parse_theta(theta_text)
    else:
        theta = load_params(report_path)
        if not isinstance(theta, NqsParams):
            raise ValueError("generate needs main-model parameters")
    kinds = ["isoflops", "isotokens"] if design == "both" else [design]
    datasets = []
    for kind in kinds:
        d = DatasetDesign(
            kind=kind, seq_len=seq_len, batch_rule=batch_rule,
            base_compute=parse_flops(base_compute), levels=levels,
            models_per_level=models_per_level, train_levels=train_levels,
        )
        datasets.append(generate_synthetic_dataset(theta, d, noise_sd=noise_sd, seed=seed))
    records = tuple(r for ds in datasets for r in ds)
    skipped = [note for ds in datasets for note in ds.meta.get("skipped", ())]
    for note in skipped:
        click.echo(f"note: skipped {note}", err=True)
    ScalingDataset(records).save_csv(out)
    click.echo(f"wrote {len(records)} records to {out}")


@main.command("baseline-chinchilla")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--inits", default=1000, show_default=True)
@click.option("--iters", default=2000, show_default=True)
@click.option("--objective", type=click.Choice(["huber", "mse"]), default="huber",
              show_default=True)
@click.option("--refine/--no-refine", default=True, show_default=True)
@click.option("--optimal-for", default=None,
              help="Also report the compute-optimal (N, D) for this budget.")
@click.pass_context
@_guarded
def chin_cmd(ctx, data, out, config_path, seed, inits, iters, objective, refine,
             optimal_for):
    """Fit the two-power-law baseline; optionally report its optimal split."""
    cfg = ChinFitConfig(n_inits=inits, n_iters=iters, objective=objective,
                        seed=seed, refine=refine)
    cfg = _apply_config_file(ctx, cfg, config_path, {
        "n_inits": "inits", "n_iters": "iters", "objective": "objective",
        "seed": "seed", "refine": "refine", "lr": None, "clip": None,
        "huber_delta": None, "beta1": None, "beta2": None, "adam_eps": None,
        "refine_top": None,
    })
    dataset = load_dataset(data)
    rep = chin_fit(dataset, cfg)
    doc = rep.to_dict()
    if optimal_for is not None:
        budget = parse_flops(optimal_for)
        n_opt, d_opt = chin_optimal_nd(rep.phi, budget)
        doc["optimal"] = {"compute": budget, "n_params": n_opt, "tokens": d_opt}
    save_report(doc, out)
    click.echo(f"baseline objective {rep.objective!r} on {rep.n_records} records; "
               f"report written to {out}")


def _load_queries(path: str):
    queries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path} is empty")
        needed = {"n_params", "batch", "steps"}
        missing = needed - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path} is missing columns: {', '.join(sorted(missing))}")
        for i, row in enumerate(reader, start=2):
            try:
                queries.append(RunConfig(
                    n_params=int(row["n_params"]), batch=int(row["batch"]),
                    steps=int(row["steps"]), seq_len=int(row.get("seq_len") or 1),
                ))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path} row {i}: {exc}") from None
    if not queries:
        raise ValueError(f"{path} has no query rows")
    return queries


@main.command("bootstrap")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--queries", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV of n_params,batch,steps[,seq_len] rows to predict.")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path; default stdout.")
@click.option("--trials", default=100, show_default=True)
@click.option("--frac", default=0.5, show_default=True)
@click.option("--level", default=0.9, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--inits", default=200, show_default=True)
@click.option("--iters", default=1500, show_default=True)
@click.option("--threads", type=int, default=None)
@_guarded
def bootstrap_cmd(data, queries, out, trials, frac, level, seed, inits, iters, threads):
    """Subsample-refit confidence intervals for predicted losses."""
    dataset = load_dataset(data)
    runs = _load_queries(queries)
    cfg = FitConfig(n_inits=inits, n_iters=iters, seed=seed,
                    threads=threads if threads is not None else _default_threads())
    intervals = bootstrap_ci(dataset, cfg, runs, trials=trials, frac=frac, level=level)
    _write_table(out, ["n_params", "batch", "steps", "seq_len", "lo", "hi"],
                 [[r.n_params, r.batch, r.steps, r.seq_len, lo, hi]
                  for r, (lo, hi) in zip(runs, intervals)])


if __name__ == "__main__":
    main()
