"""Command-line entry point: ``risslp {synth,train,solve,experiment,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
import torch

from . import experiments as X
from .scene import SceneConfig, draw_symbols, load_dataset, parse_config, save_dataset, synth_dataset

log = logging.getLogger("risslp")


def _config(args) -> SceneConfig:
    base = SceneConfig.desk() if args.preset == "desk" else SceneConfig.paper()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return parse_config(fh.read(), base)
    return base


def _frames(cfg, count, seed):
    rng = np.random.default_rng(seed)
    return np.stack([draw_symbols(cfg, rng).s for _ in range(count)])


def cmd_synth(args):
    cfg = _config(args)
    sets = synth_dataset(cfg, args.count, args.seed)
    save_dataset(args.out, sets, cfg)
    log.info("wrote %d channel sets to %s", len(sets), args.out)


def cmd_train(args):
    from .learn import LearnableParams, TrainOptions, save_weights, train_layerwise
    from .unfold import SolverOptions, default_schedule

    cfg = _config(args)
    dataset = load_dataset(args.dataset)
    frames = _frames(cfg, len(dataset), args.seed)
    sched = default_schedule(args.task, cfg.K * cfg.L, args.T)
    params = LearnableParams.around(sched, seed=args.seed, task=args.task)
    opts = TrainOptions(steps=args.steps, lr=args.lr, grad=args.grad, seed=args.seed)
    params, hist = train_layerwise(cfg, dataset, frames, params, opts, SolverOptions(task=args.task))
    save_weights(args.out, params)
    if args.log:
        hist.write_csv(args.log)
    log.info("trained %d layers (%d rollbacks); weights in %s", params.shape.T, len(hist.rollbacks), args.out)


def cmd_solve(args):
    from .detect import detection_report
    from .estimate import DegenerateGeometryError, crb_report
    from .slp_comm import simulate_ser
    from .unfold import write_trace_csv

    cfg = _config(args)
    spec = X.ExperimentSpec(
        experiment="crb_vs_power" if args.task == "estimate" else "sinr_vs_power",
        grid=(0.0,),
        schemes=(args.scheme,),
        seeds=(args.seed,),
        preset=args.preset,
        T=args.T,
        weights=args.weights,
    )
    inst = X.make_instance(cfg, args.seed)
    ch, x, phi, res = X.solve_instance(cfg, inst, args.scheme, args.task, X.schedule_for(spec, cfg, args.task))
    rep = detection_report(x, phi, ch, cfg)
    metrics = {
        "sinr_dB": 10.0 * np.log10(rep.sinr),
        "pd_at_pfa_1e-2": rep.pd,
        "feasible_fraction": X.feasibility(x, phi, inst.frame, ch, cfg),
        "ser": simulate_ser(x, phi, inst.frame, ch, cfg, args.trials, rng=args.seed)[1],
    }
    try:
        metrics["crb_theta"] = crb_report(x, phi, ch, cfg).crb_theta
    except DegenerateGeometryError as exc:
        metrics["crb_theta"] = None
        log.warning("CRB undefined: %s", exc)
    out = {
        "task": args.task,
        "scheme": args.scheme,
        "seed": args.seed,
        "x": {"re": x.real.tolist(), "im": x.imag.tolist()},
        "phi": {"re": phi.real.tolist(), "im": phi.imag.tolist()},
        "metrics": metrics,
    }
    text = json.dumps(out, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(json.dumps(metrics, indent=1))
    if args.trace:
        write_trace_csv(args.trace, res.trace)


def cmd_experiment(args):
    spec = X.load_spec(args.spec)
    if args.seed is not None:
        spec.seeds = (args.seed,)
    if args.preset is not None:
        spec.preset = args.preset
    if args.scheme:
        spec = X.ExperimentSpec(**{**spec.__dict__, "schemes": tuple(args.scheme)})
    rows = X.run_experiment(spec)
    X.write_results_csv(args.out, rows)
    failed = sum(r.status != "ok" for r in rows)
    log.info("%d rows (%d failed) written to %s", len(rows), failed, args.out)
    if spec.experiment == "timing" and args.timing:
        X.write_timing_csv(args.timing, X.timing_report(rows))


def cmd_verify(args):
    from .verify import run_all

    results = run_all(_config(args))
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risslp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, seed=0):
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--config", help="scene config file (key = value)")
        p.add_argument("--seed", type=int, default=seed)

    p = sub.add_parser("synth", help="emit a channel dataset (JSON lines)")
    common(p)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="layer-wise training of the step-size producers")
    common(p)
    p.add_argument("--task", choices=("detect", "estimate"), default="detect")
    p.add_argument("--dataset", required=True)
    p.add_argument("--T", type=int, default=None, help="outer layers (task default if omitted)")
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--grad", choices=("reverse", "spsa"), default="reverse")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--out", required=True, help="weights file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("solve", help="solve one scene and report metrics")
    common(p)
    p.add_argument("--task", choices=("detect", "estimate"), default="detect")
    p.add_argument("--scheme", choices=X.SCHEMES, default="proposed_ris")
    p.add_argument("--weights")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--trials", type=int, default=10_000, help="SER noise draws per slot")
    p.add_argument("--trace", help="per-layer trace CSV")
    p.add_argument("--out", help="result JSON (metrics printed if omitted)")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("experiment", help="run an experiment spec and write ResultRow CSV")
    p.add_argument("spec")
    p.add_argument("--seed", type=int, default=None, help="override the seeds listed in the experiment file")
    p.add_argument("--preset", choices=("desk", "paper"), default=None)
    p.add_argument("--scheme", action="append", choices=X.SCHEMES)
    p.add_argument("--timing", help="timing summary CSV (timing experiment)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("verify", help="run the quick oracle checks")
    common(p)
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
