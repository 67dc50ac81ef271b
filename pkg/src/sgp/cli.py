"""Command line entry point: ``sgp generate | fit | bench | gradcheck``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import DataFormatError, GeneratorSettings, format_float, generate, load_dataset, save_dataset
from .kernels import KernelSpec
from .model import BayesianGPLVM, SparseGPRegression, init_gplvm
from .optimizer import LBFGS, grad_check, pack
from .parallel import timing_split
from .psi_stats import VariationalPosterior

log = logging.getLogger("sgp")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

TRACE_COLUMNS = ("iter", "bound", "grad_norm", "time_s", "indistributable_fraction")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


@dataclass
class BenchRecord:
    n: int
    m: int
    q: int
    d: int
    workers: int
    iter_time_mean_s: float
    iter_time_sd_s: float
    indistributable_fraction: float
    seed: int


BENCH_COLUMNS = tuple(f.name for f in fields(BenchRecord))


def _fmt(v):
    return format_float(v) if isinstance(v, float) else str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_bench_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        types = {f.name: f.type for f in fields(BenchRecord)}
        return [BenchRecord(**{k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in row.items()})
                for row in reader]


def default_seed():
    try:
        return int(os.environ.get("SGP_SEED", "0"))
    except ValueError:
        return 0


def _int_list(text):
    try:
        vals = [int(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# ---------------------------------------------------------------------------


def cmd_generate(args):
    settings = GeneratorSettings(n=args.n, seed=args.seed)
    x, Y = generate(settings)
    save_dataset(Path(args.out), settings, x, Y, fmt=args.format)
    print(f"wrote {args.n} x {Y.shape[1]} observations ({settings.method} draw) to {args.out}")
    return EXIT_OK


def _load(path):
    try:
        return load_dataset(Path(path))
    except (FileNotFoundError, DataFormatError) as err:
        raise UsageError(str(err))


def build_model(kind, Y, latent, m, q, seed):
    if kind == "bgplvm":
        return init_gplvm(Y, q, m, seed=seed)
    if latent is None:
        raise UsageError("sgpr needs inputs: the data directory has no latent file")
    if latent.shape[1] != q:
        raise UsageError(f"sgpr inputs have {latent.shape[1]} columns but --q is {q}")
    return SparseGPRegression(latent, Y, num_inducing=m, seed=seed)


def model_to_dict(model) -> dict:
    p = model.get_params()
    out = {
        "type": "bgplvm" if isinstance(model, BayesianGPLVM) else "sgpr",
        "beta": p.beta,
        "variance": p.theta.variance,
        "lengthscales": p.theta.lengthscales.tolist(),
        "Z": p.Z.tolist(),
    }
    if p.mu is not None:
        out["mu"] = p.mu.tolist()
        out["s"] = p.s.tolist()
    return out


def cmd_fit(args):
    latent, Y, manifest = _load(args.data)
    model = build_model(args.model, Y, latent, args.m, args.q, args.seed)
    try:
        trace = model.fit(workers=args.workers, max_iters=args.iters)
    except (np.linalg.LinAlgError, ArithmeticError) as err:
        raise NumericFailure(f"fit failed: {err}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", TRACE_COLUMNS,
              [(r.iteration, r.bound, r.grad_norm, r.time_s, r.indistributable_fraction) for r in trace.rows])
    doc = {
        "model": model_to_dict(model),
        "fit": {"workers": args.workers, "iters": args.iters, "seed": args.seed, "m": args.m, "q": args.q,
                "status": trace.status, "final_bound": trace.rows[-1].bound},
        "data": {"path": str(args.data), "manifest": manifest},
    }
    (out / "model.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"bound {trace.rows[0].bound:.6g} -> {trace.rows[-1].bound:.6g} after {len(trace.rows) - 1} "
          f"iterations ({trace.status})")
    return EXIT_OK


def bench_one(Y, m, q, workers, iters, warmup, seed, trace: list | None = None) -> BenchRecord:
    """Time ``iters`` collect/broadcast rounds after ``warmup`` rounds.

    If ``trace`` is given, the bound at every accepted iterate is appended to it.
    """
    model = init_gplvm(Y, q, m, seed=seed)
    total = warmup + iters
    with model.cluster(workers) as c:
        fun = model.objective(c)
        opt = LBFGS(fun, pack(model.get_params()).values, max_evals=total)
        if trace is not None:
            trace.append(-opt.f)
        while opt.step() is not None:
            if trace is not None:
                trace.append(-opt.f)
        while len(c.rounds) < total:
            c.evaluate(model.get_params())
        rounds = c.rounds[warmup:total]
    times = np.array([r.wall for r in rounds])
    return BenchRecord(
        n=Y.shape[0], m=m, q=q, d=Y.shape[1], workers=workers,
        iter_time_mean_s=float(times.mean()),
        iter_time_sd_s=float(times.std(ddof=1)) if times.size > 1 else 0.0,
        indistributable_fraction=timing_split(rounds)["indistributable_fraction"],
        seed=seed,
    )


def cmd_bench(args):
    sizes = args.data_sizes
    if sizes != sorted(sizes):
        raise UsageError("--data-sizes must be ascending")
    records = []
    for n in sizes:
        _, Y = generate(GeneratorSettings(n=n, seed=args.seed))
        for w in args.workers:
            rec = bench_one(Y, args.m, 1, w, args.iters, args.warmup, args.seed)
            records.append(rec)
            print(f"n={n:>6d} workers={w:>2d}  {rec.iter_time_mean_s:.4f}s/iter  "
                  f"indistributable={rec.indistributable_fraction:.4f}", flush=True)
    write_csv(args.out, BENCH_COLUMNS, [astuple_record(r) for r in records])
    return EXIT_OK


def astuple_record(r: BenchRecord):
    return tuple(asdict(r)[c] for c in BENCH_COLUMNS)


def random_instance(kind, n, d, m, q, seed):
    """Small random model for gradient checking; parameters drawn in [0.5, 2]."""
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, d))
    Z = rng.uniform(-2, 2, (m, q))
    theta = KernelSpec(rng.uniform(0.5, 2), rng.uniform(0.5, 2, q))
    beta = rng.uniform(0.5, 2)
    if kind == "bgplvm":
        q_x = VariationalPosterior(rng.uniform(-2, 2, (n, q)), rng.uniform(0.5, 2, (n, q)))
        return BayesianGPLVM(Y, q_x, Z, theta, beta)
    return SparseGPRegression(rng.uniform(-2, 2, (n, q)), Y, Z=Z, theta=theta, beta=beta)


def cmd_gradcheck(args):
    if args.data:
        latent, Y, _ = _load(args.data)
        model = build_model(args.model, Y, latent, args.m, args.q, args.seed)
        rng = np.random.default_rng(args.seed)
        p = model.get_params()
        p.Z = p.Z + 0.1 * rng.standard_normal(p.Z.shape)
        model.set_params(p)
    else:
        model = random_instance(args.model, args.n, args.d, args.m, args.q, args.seed)
    v = pack(model.get_params())
    with model.cluster(args.workers) as c:
        fun = model.objective(c)
        if args.inject_fault:
            beta_idx = v.layout.slices()["log_beta"].start
            clean = fun

            def fun(x):
                f, g = clean(x)
                g = g.copy()
                g[beta_idx] *= 1.01
                return f, g

        report = grad_check(fun, v, step=args.step, seed=args.seed, tolerance=args.tol)
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser():
    seed = default_seed()
    p = argparse.ArgumentParser(prog="sgp", description="Parallel sparse GP / Bayesian GP-LVM toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthetic 1-d latent mapped to 3-d observations")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--format", choices=("csv", "bin"), default="csv")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model and write its parameters and trace")
    f.add_argument("--data", required=True)
    f.add_argument("--model", choices=("sgpr", "bgplvm"), default="bgplvm")
    f.add_argument("--m", type=int, default=100)
    f.add_argument("--q", type=int, default=1)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--iters", type=int, default=100)
    f.add_argument("--seed", type=int, default=seed)
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bench", help="time collect/broadcast rounds over data sizes and worker counts")
    b.add_argument("--data-sizes", type=_int_list, default=_int_list("1000,2000,4000,8000,16000,32000,64000"))
    b.add_argument("--workers", type=_int_list, default=[1])
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--m", type=int, default=100)
    b.add_argument("--seed", type=int, default=seed)
    b.add_argument("--out", required=True, help="output CSV")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full objective gradient")
    c.add_argument("--data")
    c.add_argument("--model", choices=("sgpr", "bgplvm"), default="bgplvm")
    c.add_argument("--n", type=int, default=20)
    c.add_argument("--d", type=int, default=3)
    c.add_argument("--m", type=int, default=5)
    c.add_argument("--q", type=int, default=2)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--seed", type=int, default=seed)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"sgp: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"sgp: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, np.linalg.LinAlgError, ArithmeticError) as err:
        print(f"sgp: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
