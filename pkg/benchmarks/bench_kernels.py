"""Benchmark the compiled fitting kernels against the pure-numpy lane.

Times the two hot entry points used by fit_nqs on identical inputs:

  * objective_batch: one objective+gradient sweep over a candidate batch
  * adam_fit: the full multi-start optimization loop

and cross-checks that both lanes return the same numbers. Run from the
repository root after an editable install:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --inits 128 --iters 600
"""

import time

import click
import numpy as np

import nqs._kernels_py as kernels_py
from nqs.fitting import DEFAULT_INIT_RANGES, latin_hypercube
from nqs.params import NqsParams
from nqs.simulator import DatasetDesign, generate_synthetic_dataset

try:
    import nqs._kernels as kernels_c
except ImportError:
    kernels_c = None

GEN_THETA = NqsParams(p=1.3, P=20.0, q=1.1, Q=0.8, r=1.2, R=4.0, e_irr=1.2)


def _build_inputs(n_candidates, seed):
    data = (generate_synthetic_dataset(GEN_THETA, DatasetDesign(kind="isoflops"))
            + generate_synthetic_dataset(GEN_THETA, DatasetDesign(kind="isotokens")))
    runs = [(r.n_params, r.batch, r.steps) for r in data.records]
    losses = [r.loss for r in data.records]
    pack = kernels_py.build_pack(runs, losses)
    ranges = [DEFAULT_INIT_RANGES[k]
              for k in ("p", "P", "q", "Q", "r", "sqrt_R", "e_irr")]
    draws = latin_hypercube(ranges, n_candidates, seed)
    thetas = draws.copy()
    thetas[:, 5] = thetas[:, 5] ** 2
    z = np.vstack([kernels_py.z_from_theta(t) for t in thetas])
    return pack, z, len(runs)


def _time_best(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


@click.command()
@click.option("--batch-size", default=256, show_default=True,
              help="Candidate vectors per objective_batch call.")
@click.option("--inits", default=64, show_default=True,
              help="Initial points for the adam_fit timing.")
@click.option("--iters", default=300, show_default=True,
              help="Adam iterations for the adam_fit timing.")
@click.option("--repeats", default=5, show_default=True,
              help="Timing repetitions (best is reported).")
@click.option("--threads", default=1, show_default=True,
              help="Worker threads for the compiled lane.")
@click.option("--seed", default=0, show_default=True)
def main(batch_size, inits, iters, repeats, threads, seed):
    if kernels_c is None:
        raise click.ClickException(
            "the nqs._kernels extension is not built; run "
            "`python3 setup.py build_ext --inplace` (or reinstall) first"
        )
    pack, z, n_records = _build_inputs(max(batch_size, inits), seed)
    zb = z[:batch_size]
    z0 = z[:inits]
    print(f"records={n_records} batch={batch_size} inits={inits} "
          f"iters={iters} threads={threads}")

    evals = batch_size * n_records
    t_py, (obj_py, grad_py) = _time_best(
        lambda: kernels_py.objective_batch(zb, pack), repeats)
    t_c, (obj_c, grad_c) = _time_best(
        lambda: kernels_c.objective_batch(zb, pack), repeats)
    d_obj = float(np.max(np.abs(obj_c - obj_py) / np.maximum(np.abs(obj_py), 1e-300)))
    d_grad = float(np.max(np.abs(grad_c - grad_py)))
    print("\nobjective_batch (best of {} runs)".format(repeats))
    print(f"  python   {t_py * 1e3:8.2f} ms   {evals / t_py / 1e6:7.2f} M record-evals/s")
    print(f"  compiled {t_c * 1e3:8.2f} ms   {evals / t_c / 1e6:7.2f} M record-evals/s")
    print(f"  speedup  {t_py / t_c:8.2f}x   max rel obj diff {d_obj:.2e}, "
          f"max abs grad diff {d_grad:.2e}")

    args = (iters, 0.01, 0.9, 0.999, 1e-8, 10.0, 1e-3, 1e6, kernels_py.KIND_HUBER)
    t_py, (_, bo_py, _) = _time_best(
        lambda: kernels_py.adam_fit(z0, pack, *args), 1)
    t_c, (_, bo_c, _) = _time_best(
        lambda: kernels_c.adam_fit(z0, pack, *args, threads), 1)
    d_init = float(np.max(np.abs(bo_c - bo_py) / np.maximum(np.abs(bo_py), 1e-300)))
    w_py, w_c = float(np.min(bo_py)), float(np.min(bo_c))
    d_win = abs(w_c - w_py) / max(abs(w_py), 1e-300)
    print(f"\nadam_fit ({inits} inits x {iters} iters, single run)")
    print(f"  python   {t_py:8.2f} s   winning objective {w_py:.6e}")
    print(f"  compiled {t_c:8.2f} s   winning objective {w_c:.6e}")
    print(f"  speedup  {t_py / t_c:8.2f}x   winner rel diff {d_win:.2e}")
    print(f"  per-init best objectives drift apart as rounding differences "
          f"compound over the trajectory (max rel diff {d_init:.2e})")


if __name__ == "__main__":
    main()
