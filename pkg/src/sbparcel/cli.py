"""Command-line front end: ``sbparcel {fit,tune,simulate,evaluate,report}``.

Every command writes its outputs, plus ``config.json`` echoing all effective
parameters, under ``--out``. Passing that echo back with ``--config`` replays
the run. Exit codes: 0 success, 1 validation error, 2 runtime failure; on a
nonzero exit ``error.json`` is written to ``--out`` when it is known.
"""
import argparse
import json
import logging
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np

from . import matrix_io
from .data_model import (
    AggregationMethod,
    PreferenceMode,
    aggregate_adjacency,
    build_preference_matrix,
    load_cohort,
    write_cohort,
)
from .errors import KOutOfRange, MissingModelArtifact, NoEdgesSelected, SBPError
from .evaluation import reproducibility
from .prediction import (
    DEFAULT_LAMBDA_GRID,
    CPMConfig,
    CPMModel,
    compact,
    cpm_fit,
    edge_importance_report,
    node_connectomes,
    tune_lambda,
    write_edge_table,
)
from .simulation import (
    LatticeSpec,
    PlantedCohortSpec,
    halves_edge,
    run_lattice_experiment,
    synth_cohort,
    toy_three_voxel,
)
from .solver import SBPConfig, multi_restart_fit
from .spectral import spectral_embedding

log = logging.getLogger("sbparcel")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (AggregationMethod, PreferenceMode)):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o)}")


def _sbp_config(args, K, lam=0.0):
    return SBPConfig(K=K, lam=lam, max_iter=args.max_iter, tol=args.tol, n_restarts=args.restarts,
                     seed=args.seed, n_jobs=args.jobs)


def _cpm_config(args):
    return CPMConfig(selection_p_threshold=args.cpm_threshold, predictor=args.predictor,
                     ridge_penalty=args.ridge_penalty)


def _add_solver_flags(p):
    p.add_argument("--k", type=int, required=False)
    p.add_argument("--agg", choices=[m.value for m in AggregationMethod], default="mean-squared")
    p.add_argument("--preference", choices=[m.value for m in PreferenceMode], default="pearson")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)


def _add_cpm_flags(p):
    p.add_argument("--cpm-threshold", type=float, default=0.01)
    p.add_argument("--predictor", choices=["cpm-sum", "ridge"], default="cpm-sum")
    p.add_argument("--ridge-penalty", type=float, default=1.0)


def build_parser():
    parser = _Parser(prog="sbparcel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON file of defaults; flags override it")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("fit", help="fit one parcellation")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--dump-embedding", action="store_true")
    _add_solver_flags(p)
    _add_cpm_flags(p)

    p = sub.add_parser("tune", help="nested cross-validation over lambda")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--lambda-grid", type=_floats, default=list(DEFAULT_LAMBDA_GRID))
    p.add_argument("--folds-outer", type=int, default=10)
    p.add_argument("--folds-inner", type=int, default=10)
    p.add_argument("--folds-file", help="replay a persisted fold assignment")
    p.add_argument("--r2-mean", choices=["test", "train"], default="test")
    _add_solver_flags(p)
    _add_cpm_flags(p)

    p = sub.add_parser("simulate", help="generate synthetic data")
    common(p)
    p.add_argument("kind", choices=["lattice", "toy", "cohort"])
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 5.0, 10.0])
    p.add_argument("--penalty", type=float, default=1.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--p", type=int, default=60)
    p.add_argument("--k-true", type=int, default=6)
    p.add_argument("--timepoints", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--outcome-noise", type=float, default=0.02)
    p.add_argument("--predictive", choices=["halves", "none"], default="halves")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    _add_solver_flags(p)

    p = sub.add_parser("evaluate", help="subsample reproducibility (Dice)")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--fraction", type=float, default=0.75)
    p.add_argument("--reference-sample", type=int, default=0)
    _add_solver_flags(p)

    p = sub.add_parser("report", help="edge-importance table from a CPM model")
    common(p)
    p.add_argument("--model", help="cpm_model.json written by `fit`")
    p.add_argument("--mode", choices=["top-fraction", "abs-threshold"], default="top-fraction")
    p.add_argument("--cutoff", type=float, default=0.2)
    p.add_argument("--measure", choices=["coefficient", "correlation"])
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        defaults.pop("command", None)
        defaults.pop("config", None)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ValidationError(f"--{name.replace('_', '-')} is required for `{args.command}`")


def cmd_fit(args, out):
    _require(args, "manifest", "k")
    cohort = load_cohort(args.manifest)
    if not 1 <= args.k <= cohort.p:
        raise KOutOfRange(f"K={args.k} outside [1, {cohort.p}]")
    A = aggregate_adjacency(cohort, args.agg)
    R = build_preference_matrix(cohort, args.preference)
    emb = spectral_embedding(A, args.k)
    cfg = _sbp_config(args, args.k, args.lam)
    fit = multi_restart_fit(emb.U, R, cfg)
    matrix_io.write_parcellation_csv(out / "parcellation.csv", fit.labels, cohort.voxel_ids)
    _write_json(out / "fit_result.json", fit.summary(cfg))
    if args.dump_embedding:
        matrix_io.write_matrix_binary(out / "embedding.sbpm", emb.U)
    try:
        parc = compact(fit.parcellation)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoEdgesSelected)
            model = cpm_fit(node_connectomes(cohort, parc), cohort.outcomes, _cpm_config(args))
        _write_json(out / "cpm_model.json", model.to_dict())
    except SBPError as exc:
        log.warning("CPM model not written: %s", exc)


def cmd_tune(args, out):
    _require(args, "manifest", "k")
    cohort = load_cohort(args.manifest)
    folds = None
    if args.folds_file:
        folds = json.loads(Path(args.folds_file).read_text())
    report = tune_lambda(
        cohort, args.k, args.lambda_grid, AggregationMethod(args.agg), _cpm_config(args),
        folds_outer=args.folds_outer, folds_inner=args.folds_inner, seed=args.seed,
        sbp_config=_sbp_config(args, args.k), preference_mode=PreferenceMode(args.preference),
        r2_mean=args.r2_mean, folds=folds, n_jobs=args.jobs)
    d = report.to_dict()
    _write_json(out / "folds.json", d.pop("folds"))
    _write_json(out / "cv_report.json", d)


def cmd_simulate(args, out):
    if args.kind == "toy":
        _write_json(out / "toy.json", toy_three_voxel())
        return
    if args.kind == "lattice":
        spec = LatticeSpec(rows=args.rows, cols=args.cols, penalty_value=args.penalty)
        K = args.k if args.k is not None else 15
        results = run_lattice_experiment(spec, K, args.lambdas, _sbp_config(args, K))
        metrics = []
        for res in results:
            name = f"labels_lambda_{res['lambda']:g}.csv"
            np.savetxt(out / name, res["labels"], fmt="%d", delimiter=",")
            metrics.append({k: v for k, v in res.items() if k != "labels"} | {"labels_file": name})
        _write_json(out / "metrics.json", {"K": K, "rows": spec.rows, "cols": spec.cols,
                                           "penalty_value": spec.penalty_value, "runs": metrics})
        return
    K_true = args.k_true
    block = args.p // K_true
    predictive = (halves_edge(range(block)),) if args.predictive == "halves" else ()
    spec = PlantedCohortSpec(p=args.p, n=args.n, K_true=K_true, predictive=predictive,
                             n_timepoints=args.timepoints, noise=args.noise,
                             outcome_noise=args.outcome_noise, seed=args.seed)
    write_cohort(synth_cohort(spec), out, matrix_format=args.format)


def cmd_evaluate(args, out):
    _require(args, "manifest", "k")
    cohort = load_cohort(args.manifest)
    report = reproducibility(
        cohort, args.k, args.lam, AggregationMethod(args.agg), n_samples=args.samples,
        fraction=args.fraction, seed=args.seed, sbp_config=_sbp_config(args, args.k),
        preference_mode=PreferenceMode(args.preference), reference_sample=args.reference_sample,
        n_jobs=args.jobs)
    _write_json(out / "dice_report.json", report.to_dict())
    (out / "subsamples").mkdir(exist_ok=True)
    for q, parc in enumerate(report.parcellations):
        matrix_io.write_parcellation_csv(out / "subsamples" / f"sample_{q:02d}.csv", parc.labels,
                                         cohort.voxel_ids)


def cmd_report(args, out):
    _require(args, "model")
    path = Path(args.model)
    if not path.is_file():
        raise MissingModelArtifact(f"model file {path} not found")
    model = CPMModel.from_dict(json.loads(path.read_text()))
    if model.training_summary.get("intercept_only"):
        log.warning("model is intercept-only; edge table is empty")
        rows = []
    else:
        rows = edge_importance_report(model, args.mode, args.cutoff, args.measure)
    write_edge_table(out / "edges.csv", rows)


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    out = None
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        echo = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
        _write_json(out / "config.json", echo)
        COMMANDS[args.command](args, out)
        return 0
    except (ValidationError, SBPError, ValueError) as exc:
        code, kind = 1, "validation"
        err = exc
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        code, kind = 2, "runtime"
        err = exc
        log.debug(traceback.format_exc())
    payload = {"status": "error", "kind": kind, "exit_code": code,
               "error": type(err).__name__, "message": str(err)}
    if out is None:
        out = _guess_out(argv)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", payload)
        except OSError:
            pass
    print(json.dumps(payload), file=sys.stderr)
    return code


def _guess_out(argv):
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--out="):
            return Path(tok.split("=", 1)[1])
    return None


if __name__ == "__main__":
    sys.exit(main())
