"""Command line front end.

Verbs: ``gen-data``, ``cluster-plan``, ``train-iid``, ``train-noniid``,
``train-dsgd``, ``eval`` and ``report``. Exit codes are 0 on success, 2 for
configuration errors, 3 for runtime errors and 4 when ``--check`` is given
and the run misses its acceptance checks.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .clustering import cluster_with_replication
from .config import DEFAULTS, load_config
from .data import load_dataset, save_dataset
from .errors import ConfigError, Dmcr2Error
from .runner import StageError, emit_reports, evaluate, load_checkpoints, load_data, run_experiment
from .training import TrainedState

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
ANTISYMMETRY_TOL = 1e-10

log = logging.getLogger("dmcr2")


def _common(suppress=False):
    # the verb-level copy suppresses defaults so flags given before the verb survive
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML config file or preset name", **kw)
    p.add_argument("--out", help="output directory (overrides run.out)", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)", **kw)
    p.add_argument("--quiet", action="store_true", help="only print errors", **kw)
    p.add_argument("--check", action="store_true", help="exit 4 when acceptance checks fail", **kw)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="dmcr2", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(suppress=True)
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="materialize the train/test datasets of a config")
    cp = sub.add_parser("cluster-plan", parents=[common], help="cluster agents from their label sets")
    cp.add_argument("--labels", required=True, help="JSON file holding a list of label lists")
    sub.add_parser("train-iid", parents=[common], help="run the full i.i.d. pipeline")
    sub.add_parser("train-dsgd", parents=[common], help="run the full D-SGD baseline pipeline")
    tn = sub.add_parser("train-noniid", parents=[common], help="run the full non-i.i.d. pipeline")
    tn.add_argument("--plan", help="cluster plan JSON (overrides partition.plan)")
    ev = sub.add_parser("eval", parents=[common], help="evaluate saved checkpoints on a dataset")
    ev.add_argument("--checkpoints", required=True)
    ev.add_argument("--data", required=True, help="dataset file (.mc2d) to evaluate on")
    ev.add_argument("--train-data", help="dataset used to fit the classifier (defaults to --data)")
    ev.add_argument("--min-accuracy", type=float, default=0.0)
    rp = sub.add_parser("report", parents=[common], help="summarize a finished run directory")
    rp.add_argument("run_dir", nargs="?", help="run directory (defaults to --out)")
    return parser


def _config(args, algorithm=None):
    if not args.config:
        raise ConfigError("--config is required for this verb")
    cfg = load_config(args.config)
    if algorithm is not None:
        cfg.sections["run"]["algorithm"] = algorithm
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _checks(report, state, min_accuracy):
    failures = []
    if not report.theorem1.get("passed", False):
        failures.append("theorem1 property suite")
    if report.accuracy is not None and report.accuracy < min_accuracy:
        failures.append(f"accuracy {report.accuracy:.4f} < {min_accuracy}")
    if state is not None and state.antisymmetry:
        worst = max(v for _, v in state.antisymmetry)
        if worst > ANTISYMMETRY_TOL:
            failures.append(f"dual antisymmetry {worst:.3g}")
    return failures


def _report_checks(args, report, state, min_accuracy):
    if not args.check:
        return EXIT_OK
    failures = _checks(report, state, min_accuracy)
    for msg in failures:
        log.error("check failed: %s", msg)
    return EXIT_CHECK if failures else EXIT_OK


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out or cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    save_dataset(train, out / "train.mc2d")
    if test is not None:
        save_dataset(test, out / "test.mc2d")
    log.info("wrote %d train samples to %s", train.m, out)
    return EXIT_OK


def cmd_cluster_plan(args):
    with open(args.labels) as f:
        label_sets = json.load(f)
    plan = cluster_with_replication(label_sets)
    text = json.dumps(plan.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _train(args, algorithm):
    cfg = _config(args, algorithm)
    if getattr(args, "plan", None):
        cfg.sections["partition"]["plan"] = str(Path(args.plan).resolve())
    manifest = run_experiment(cfg)
    report = manifest.report
    log.info("run %s finished; accuracy %.4f", cfg["run"]["out"], report.accuracy)
    return _report_checks(args, report, manifest.state, cfg["eval"]["min_accuracy"])


def cmd_eval(args):
    encoders, kind = load_checkpoints(args.checkpoints)
    test = load_dataset(args.data)
    train = load_dataset(args.train_data) if args.train_data else test
    eval_cfg = load_config(args.config)["eval"] if args.config else dict(DEFAULTS["eval"])
    report, sub, Z = evaluate(encoders, train, test, eval_cfg, kind, seed=args.seed or 0)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    emit_reports(TrainedState(params={}, kind=kind), report, sub, Z, out)
    log.info("accuracy %.4f", report.accuracy)
    return _report_checks(args, report, None, args.min_accuracy)


def cmd_report(args):
    run = Path(args.run_dir or args.out or ".")
    with open(run / "manifest.json") as f:
        manifest = json.load(f)
    summary = {"status": manifest["status"], "config_hash": manifest["config_hash"]}
    geo = run / "geometry.json"
    if geo.exists():
        with open(geo) as f:
            g = json.load(f)
        summary.update({k: g.get(k) for k in ("accuracy", "wccr", "iidr", "offdiag_mean", "offdiag_std")})
        summary["theorem1"] = g.get("theorem1", {}).get("passed")
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.check and (summary["status"] != "ok" or summary.get("theorem1") is False):
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "cluster-plan": cmd_cluster_plan,
    "train-iid": lambda a: _train(a, "iid"),
    "train-noniid": lambda a: _train(a, "noniid"),
    "train-dsgd": lambda a: _train(a, "dsgd"),
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        if isinstance(exc.cause, ConfigError):
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        log.error("%s", exc)
        return EXIT_RUNTIME
    except (Dmcr2Error, OSError, ValueError) as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
