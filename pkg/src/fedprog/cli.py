"""``fedprog`` command line: simulate, ingest-cmapss, train, evaluate, reproduce."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .datagen import generate_study, preset
from .experiments import STUDIES, ExperimentReport, SuiteConfig, run_suite, write_suite
from .federation import FederationPlan
from .lls import FAMILIES
from .pipeline import Selection, evaluate, load_model, train_federated, train_individual, train_nonfederated
from .signals import read_study, write_study

log = logging.getLogger("fedprog")


class UsageError(Exception):
    pass


def _k_grid(text):
    if text is None:
        return None
    try:
        if ".." in text:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
            if lo < 1 or hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b or a comma list of positive ints, got {text!r}") from None


def _levels(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated fractions, got {text!r}") from None
    if any(not 0 <= v < 1 for v in vals):
        raise argparse.ArgumentTypeError("missing levels must lie in [0, 1)")
    return vals


def _plan(args, **kw) -> FederationPlan:
    return FederationPlan(max_sweeps=args.max_sweeps, conv_eps=args.conv_eps, transport=args.transport,
                          straggler_policy=args.straggler, tau_comm=args.tau_ms / 1000.0, seed=args.seed, **kw)


def _selection(args) -> Selection:
    if args.k is not None:
        return Selection(method="fixed", K=args.k)
    return Selection(method=args.select, folds=args.folds, fve_threshold=args.fve_threshold,
                     k_grid=args.k_grid, cv_seed=args.seed)


def _need_out(args):
    if not args.out:
        raise UsageError("--out DIR is required")
    return args.out


def cmd_simulate(args) -> int:
    out = _need_out(args)
    st = generate_study(preset(args.study, missing_fraction=args.missing, seed=args.seed))
    write_study(out, st.participants, st.test)
    print(f"wrote {len(st.participants)} participants and {len(st.test)} test systems to {out}")
    return 0


def cmd_ingest_cmapss(args) -> int:
    from .cmapss import load_case_study
    out = _need_out(args)
    parts, test = load_case_study(args.dir, args.subset, missing_fraction=args.missing, seed=args.seed)
    write_study(out, parts, test)
    print(f"wrote {len(parts)} participants and {len(test)} test engines to {out}")
    return 0


def cmd_train(args) -> int:
    out = _need_out(args)
    parts, _ = read_study(args.data)
    plan = _plan(args)
    sel = _selection(args)
    if args.mode == "federated":
        model = train_federated(parts, args.family, plan, sel)
    elif args.mode == "individual":
        if args.user is None:
            raise UsageError("--mode individual needs --user")
        pid = args.user if str(args.user).startswith("user") else f"user{args.user}"
        match = [d for d in parts if d.participant_id == pid]
        if not match:
            raise UsageError(f"no participant {pid!r}; have {[d.participant_id for d in parts]}")
        model = train_individual(match[0], args.family, plan, sel)
    else:
        if args.k is None:
            fm = train_federated(parts, args.family, plan, sel)
            K, K_sub = fm.K, fm.K_sub
        else:
            K, K_sub = args.k, args.k + 1
        model = train_nonfederated(parts, K, K_sub, plan, args.family)
    model.save(out)
    print(f"{args.mode} model with K={model.K} written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    _, test = read_study(args.data)
    if test is None or len(test) == 0:
        raise UsageError(f"{args.data} has no test set")
    with open(os.path.join(args.model, "meta.json")) as fh:
        meta = json.load(fh)
    if meta["N"] != test.grid.N:
        raise UsageError(f"model grid length {meta['N']} does not match test grid length {test.grid.N}")
    rep = ExperimentReport("evaluate", model.mode, float("nan"), args.seed, evaluate(model, test), K=model.K)
    if args.out:
        write_suite(args.out, "evaluate", SuiteConfig(), [rep], {}, 0.0)
    print(f"median {rep.median:.4f} IQR {rep.iqr:.4f} over {rep.errors.size} test systems")
    return 0


def cmd_reproduce(args) -> int:
    if args.study == "cmapss" and not args.cmapss_dir:
        raise UsageError("the cmapss study needs --cmapss-dir")
    kw = dict(seed=args.seed, family=args.family, max_sweeps=args.max_sweeps, conv_eps=args.conv_eps,
              transport=args.transport, selection=_selection(args), tau_ms=args.tau_ms, workers=args.workers,
              cmapss_dir=args.cmapss_dir, individual=not args.no_individual)
    if args.levels is not None:
        kw["levels"] = args.levels
    if args.perms is not None:
        kw["permutations"] = args.perms
        kw["repeats"] = args.perms
    if args.users is not None:
        kw["users"] = tuple(int(u) for u in args.users.split(","))
    if args.iterations is not None:
        kw["iterations"] = tuple(int(u) for u in args.iterations.split(","))
    cfg = SuiteConfig(**kw)
    reports, failures = run_suite(args.study, cfg, args.out, args.emit_gnuplot)
    print(f"{args.study}: {len(reports)} reports, {len(failures)} failed cells")
    for cid in sorted(failures):
        print(f"  failed: {cid}", file=sys.stderr)
    return 0 if not failures else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    common.add_argument("--max-sweeps", type=int, default=100)
    common.add_argument("--conv-eps", type=float, default=1e-6)
    common.add_argument("--straggler", choices=("none", "drop-one"), default="none")
    common.add_argument("--tau-ms", type=float, default=2.0, help="modeled milliseconds per basis hand-off")
    common.add_argument("--family", choices=sorted(FAMILIES), default="lognormal")
    common.add_argument("--select", choices=("cv", "fve"), default="cv")
    common.add_argument("--folds", type=int, default=5)
    common.add_argument("--fve-threshold", type=float, default=0.9)
    common.add_argument("--k-grid", type=_k_grid, default=None, help="candidate K values, e.g. 1..8")
    common.add_argument("--k", type=int, default=None, help="skip selection and use this K")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedprog", description="Federated degradation-based prognostics")
    p.add_argument("--version", action="version", version=f"fedprog {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic study")
    s.add_argument("--study", choices=("sim1", "stragglers", "scale"), default="sim1")
    s.add_argument("--missing", type=float, default=0.3)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest-cmapss", parents=[common], help="convert the turbofan files to a study")
    s.add_argument("--dir", required=True)
    s.add_argument("--subset", default="FD001")
    s.add_argument("--missing", type=float, default=0.3)
    s.set_defaults(func=cmd_ingest_cmapss)

    s = sub.add_parser("train", parents=[common], help="train a model on a study directory")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("federated", "individual", "non-federated"), default="federated")
    s.add_argument("--user", default=None, help="participant number or id for --mode individual")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a study's test set with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("reproduce", parents=[common], help="run an experiment suite")
    s.add_argument("study", choices=STUDIES)
    s.add_argument("--levels", type=_levels, default=None, help="missing fractions, e.g. 0.3,0.5,0.7")
    s.add_argument("--perms", type=int, default=None, help="permutations (or straggler repeats)")
    s.add_argument("--users", default=None, help="user counts for the timing study")
    s.add_argument("--iterations", default=None, help="sweep budgets for the straggler study")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-individual", action="store_true")
    s.add_argument("--emit-gnuplot", action="store_true")
    s.add_argument("--cmapss-dir", default=None)
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"fedprog {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
