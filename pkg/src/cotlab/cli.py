"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import io

log = logging.getLogger("cotlab")

COMMANDS = ("gen-task", "train", "figure4", "theorem3", "theorem4", "hardness-demo", "grad-check", "verify-link")


def _limit_threads() -> None:
    # must run before numpy spins up its BLAS pool to take full effect
    threads = os.environ.get("COTLAB_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    spec = {
        "d": dict(type=int), "k": dict(type=int), "n": dict(type=int), "nprime": dict(type=int, default=0),
        "epochs": dict(type=int, default=350), "eta": dict(type=float), "seed": dict(type=int, default=0),
        "out": dict(type=Path),
    }
    for name in names:
        p.add_argument(f"--{name}", **spec[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotlab", description="CoT parity transformer laboratory")
    parser.add_argument("--config", type=Path, help="JSON file of default flag values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("gen-task", help="sample a target parity and a labeled dataset")
    _common(p, "d", "k", "n", "seed", "out")
    p.add_argument("--target", type=str, help="comma-separated 1-based indices")

    p = sub.add_parser("train", help="train one regime")
    _common(p, "d", "k", "n", "nprime", "epochs", "eta", "seed", "out")
    p.add_argument("--regime", choices=["direct", "cot", "cot_tf", "cot_sc"])
    p.add_argument("--mask", choices=["causal", "block"])
    p.add_argument("--filter", choices=["off", "token", "weight"])
    p.add_argument("--filter-threshold", type=float)
    p.add_argument("--latch", action="store_true")
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--loss-mix", type=float)
    p.add_argument("--oracle-eps", type=float)

    p = sub.add_parser("figure4", help="train all four regimes and plot the loss curves")
    _common(p, "d", "k", "n", "nprime", "epochs", "eta", "seed", "out")
    p.add_argument("--log-y", action="store_true")

    p = sub.add_parser("theorem3", help="one teacher-forced step from zero")
    _common(p, "d", "k", "n", "eta", "seed", "out")
    p.add_argument("--oracle-eps", type=float)

    p = sub.add_parser("theorem4", help="staged quantized updates with the token filter")
    _common(p, "d", "k", "n", "nprime", "seed", "out")
    p.add_argument("--eta0", type=float)
    p.add_argument("--filter-threshold", type=float)

    p = sub.add_parser("hardness-demo", help="gradient descent through the adversarial oracle")
    _common(p, "d", "k", "n", "eta", "seed", "out")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--oracle-eps", type=float)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    _common(p, "d", "k", "n", "seed")
    p.add_argument("--trials", type=int, default=5)

    p = sub.add_parser("verify-link", help="check the link-function invariants")
    p.add_argument("--link", type=Path, help="JSON list of {lo, hi, a, b, c} pieces")
    return parser


def _parse(argv) -> tuple[argparse.ArgumentParser, argparse.Namespace]:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config: {exc}")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {unknown}")
        if "out" in cfg:
            cfg["out"] = Path(cfg["out"])
        # file values become defaults, so explicit flags still win
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return parser, args


def _require(parser, args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        parser.error(f"{args.command} requires {', '.join(missing)}")


def _tree(args):
    from .task import build_instance, build_tree

    target = [int(t) for t in args.target.split(",")] if getattr(args, "target", None) else None
    return build_tree(build_instance(args.d, args.k, target=target, seed=None if target else args.seed))


def cmd_gen_task(parser, args) -> int:
    from .task import ground_truth_labels, sample_inputs

    _require(parser, args, "d", "k", "n", "out")
    tree = _tree(args)
    data = ground_truth_labels(tree, sample_inputs(args.d, args.n, args.seed, width=tree.size))
    io.write_instance(args.out / "instance.json", tree.instance)
    io.write_dataset(args.out / "dataset.csv", data)
    print(f"target {list(tree.instance.target)}; wrote {args.out}")
    return 0


def cmd_train(parser, args) -> int:
    from .model import FilterConfig, FilterMode
    from .task import ground_truth_labels, sample_augmented, sample_inputs
    from .training import DataSpec, Regime, TrainConfig, TrainingDiverged, train

    _require(parser, args, "regime", "d", "k", "n")
    regime = Regime(args.regime)
    if args.mask and args.mask != regime.mask_kind.value:
        parser.error(f"regime {regime.value} uses the {regime.mask_kind.value} mask")
    kw = {}
    if args.filter is not None:
        mode = FilterMode(args.filter)
        if mode is FilterMode.OFF:
            kw["filter"] = FilterConfig()
        else:
            thr = args.filter_threshold if args.filter_threshold is not None else (0.5 if mode is FilterMode.TOKEN else 0.4)
            kw["filter"] = FilterConfig(mode, thr, args.latch)
    elif args.filter_threshold is not None or args.latch:
        kw["filter"] = FilterConfig.weight(args.filter_threshold or 0.4, args.latch)
    if args.loss_mix is not None:
        kw["loss_mix"] = args.loss_mix
    tree = _tree(args)
    spec = DataSpec(args.d, args.k, args.n, args.nprime)
    try:
        cfg = TrainConfig.for_regime(regime, spec, epochs=args.epochs, eta=args.eta, seed=args.seed,
                                     quantize_every_step=args.quantize, oracle_eps=args.oracle_eps, **kw)
    except ValueError as exc:
        parser.error(str(exc))
    data = ground_truth_labels(tree, sample_inputs(args.d, args.n, args.seed, width=tree.size))
    aug = sample_augmented(args.d, args.nprime, args.seed, width=tree.size) if args.nprime else None
    try:
        trace = train(cfg, data, aug, tree)
    except (TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    fin = trace.final
    print(f"{regime.value}: final cot_loss {fin.cot_loss:.6f} pred_loss {fin.pred_loss:.6f} "
          f"filter deactivation {trace.deactivation_epochs()}")
    if args.out:
        io.write_trace(args.out / "trace.csv", trace)
        io.write_checkpoint(args.out / "weights.json", trace.weights, args.d, args.k)
        io.write_metadata(args.out / "metadata.json", cfg.to_json(), instance=tree.instance.to_json())
    return 0


def cmd_figure4(parser, args) -> int:
    from .experiments import ExperimentSpec, run_figure4

    _require(parser, args, "d", "k", "n")
    try:
        spec = ExperimentSpec.figure4(args.d, args.k, args.n, args.epochs, args.seed, args.nprime, args.out,
                                      eta=args.eta, log_y=args.log_y)
    except ValueError as exc:
        parser.error(str(exc))
    traces = run_figure4(spec)
    for regime, trace in traces.items():
        print(f"{regime.value:7s} cot {trace.final.cot_loss:.4f} pred {trace.final.pred_loss:.4f} "
              f"deactivation {trace.deactivation_epochs()}")
    return 0


def cmd_theorem3(parser, args) -> int:
    from .checks import theorem3_check

    _require(parser, args, "d", "k")
    source = ("sample", args.n, args.seed) if args.n else "enumerate"
    try:
        rep = theorem3_check(_tree(args), args.eta, source, args.oracle_eps, seed=args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    ok = rep.min_child_score >= 0.45 and rep.test.max_abs_err <= 0.2
    print(f"eta {rep.eta:.4g}: min child score {rep.min_child_score:.4f}, min child mass {rep.child_mass.min():.4f}, "
          f"top-two at children {all(rep.argmax_at_children)}, max test error {rep.test.max_abs_err:.3g}")
    if args.out:
        io.write_json(args.out / "theorem3.json", {
            "eta": rep.eta, "child_scores": rep.child_scores.tolist(), "max_test_error": rep.test.max_abs_err,
            "leading": [vars(r) for r in rep.leading], "ok": ok,
        })
    return 0 if ok else 1


def cmd_theorem4(parser, args) -> int:
    from .checks import DEFAULT_ETA0, STAGED_EPS0, STAGED_N_PRIME, theorem4_check

    _require(parser, args, "d", "k")
    source = ("sample", args.n, args.seed) if args.n else "enumerate"
    try:
        rep = theorem4_check(_tree(args), args.eta0 or DEFAULT_ETA0, source, args.nprime or STAGED_N_PRIME,
                             args.filter_threshold or STAGED_EPS0, seed=args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    for v in rep.violations[:20]:
        print(f"violation t={v.t} m={v.m} j={v.j}: {v.reason} (w={v.value})")
    ok = rep.ok and rep.test.max_abs_err <= 0.1
    print(f"eta {rep.eta:.4g}: level constants {dict((k, float(v)) for k, v in rep.level_values.items())}, "
          f"violations {len(rep.violations)}, stable {rep.stable_after}, max test error {rep.test.max_abs_err:.3g}")
    if args.out:
        io.write_checkpoint(args.out / "weights.json", rep.snapshots[-1], args.d, args.k)
        io.write_json(args.out / "theorem4.json", {
            "eta": rep.eta, "eta0": rep.eta0, "level_values": {str(k): float(v) for k, v in rep.level_values.items()},
            "violations": [vars(v) | {"j": int(v.j), "value": float(v.value)} for v in rep.violations],
            "stable_after": rep.stable_after, "max_test_error": rep.test.max_abs_err, "ok": ok,
        })
    return 0 if ok else 1


def cmd_hardness(parser, args) -> int:
    import csv

    from .hardness import enumerate_family, hardness_demo

    _require(parser, args, "d", "k")
    try:
        fam = enumerate_family(args.d, args.k)
    except ValueError as exc:
        parser.error(str(exc))
    rep = hardness_demo(fam, args.trials, args.queries, args.n or 4096, args.oracle_eps,
                        args.eta if args.eta is not None else 1.0, seed=args.seed)
    print(json.dumps(rep.summary()))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "hardness.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "target", "final_l2", "oracle_interventions"])
            for t in rep.trials:
                w.writerow([t.trial, " ".join(map(str, t.target)), repr(t.final_l2), t.oracle_interventions])
        io.write_json(args.out / "summary.json", rep.summary())
    return 0


def cmd_grad_check(parser, args) -> int:
    from .checks import gradient_check

    try:
        results = gradient_check(args.d or 8, args.k or 4, args.n or 256, args.trials, args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    for r in results:
        print(f"{r.regime:16s} max rel error {r.max_rel_error:.3e} {'PASS' if r.ok else 'FAIL'}")
    return 0 if all(r.ok for r in results) else 1


def cmd_verify_link(parser, args) -> int:
    from .link import DEFAULT_LINK, LinkFunction, link_constants, verify_invariants

    link = DEFAULT_LINK
    if args.link:
        try:
            link = LinkFunction.from_json(args.link.read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            parser.error(f"bad link spec: {exc}")
    problems = verify_invariants(link)
    for a in (-1.0, 1.0):
        for b in (-1.0, 1.0):
            if abs(link((a + b) / 2) - a * b) > 1e-12:
                problems.append(f"phi(({a}+{b})/2) != {a * b}")
    c, sup, g = link_constants(link)
    print(f"c={c:g} sup|phi'|={sup:g} g={g:g}")
    for p in problems:
        print(f"FAIL {p}")
    return 0 if not problems else 1


HANDLERS = {
    "gen-task": cmd_gen_task, "train": cmd_train, "figure4": cmd_figure4, "theorem3": cmd_theorem3,
    "theorem4": cmd_theorem4, "hardness-demo": cmd_hardness, "grad-check": cmd_grad_check, "verify-link": cmd_verify_link,
}


def main(argv=None) -> int:
    _limit_threads()
    try:
        parser, args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
