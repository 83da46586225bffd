"""Batch command line: simulate, train, calibrate, plan, evaluate, noise-sweep, stats.

Every command reads and writes inside one output directory, so the default
pipeline is::

    mdpssp simulate --out runs/demo
    mdpssp train --out runs/demo
    mdpssp calibrate --out runs/demo
    mdpssp evaluate --out runs/demo

Exit codes: 0 success, 2 usage, 3 missing file, 4 schema mismatch,
5 config error, 6 invalid or degenerate data, 1 anything else.  Failures also
print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special

from . import evaluation
from .config import RunConfig, load_config
from .core import MdpModel
from .errors import (
    ConfigError,
    DegenerateDataError,
    InvalidDataError,
    InvalidModelError,
    InvalidPathError,
    MdpSspError,
    SchemaError,
)
from .models import (
    LinearModel,
    SessionLog,
    auc,
    bag_level_auc,
    binned_calibration_rmse,
    fit_mi_svm,
    fit_platt,
    fit_platt_bags,
    train_click_model,
    train_quit_model_no_mil,
)
from .planner import PlannerConfig, plan_with
from .simulator import (
    GroundTruth,
    TrainedSource,
    UserContext,
    generate_ground_truth,
    generate_sessions,
    generate_users,
    produce_mdp,
    sessions_from_jsonl,
    sessions_to_jsonl,
)

log = logging.getLogger("mdpssp")

EXIT_MISSING, EXIT_SCHEMA, EXIT_CONFIG, EXIT_DATA = 3, 4, 5, 6

GROUND_TRUTH = "ground_truth.json"
SESSIONS = "sessions.jsonl"
SESSIONS_META = "sessions.meta.json"
USERS = "users.json"
CLICK_MODEL = "click_model.json"
QUIT_MIL = "quit_model_mil.json"
QUIT_NO_MIL = "quit_model_no_mil.json"
RESOLVED_CONFIG = "config.resolved.ini"


class MissingFileError(MdpSspError, FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# file helpers


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _stamp(cfg: RunConfig, doc: dict) -> dict:
    return {**doc, "config_hash": cfg.hash(), "seed": cfg.seed}


def write_json(cfg: RunConfig, path: Path, doc: dict) -> None:
    write_atomic(path, json.dumps(_stamp(cfg, doc), sort_keys=True, indent=2) + "\n")


def read_text(path: Path) -> str:
    if not path.is_file():
        raise MissingFileError(f"missing input file {path}")
    return path.read_text()


def read_json(path: Path) -> dict:
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    write_atomic(out / RESOLVED_CONFIG, f"# config_hash = {cfg.hash()}\n" + cfg.to_ini())


def load_ground_truth(path: Path) -> GroundTruth:
    return GroundTruth.from_dict(read_json(path))


def load_users(path: Path) -> list[UserContext]:
    doc = read_json(path)
    if "users" not in doc:
        raise SchemaError(f"{path}: expected a 'users' list")
    return [UserContext.from_dict(u) for u in doc["users"]]


def load_model(path: Path) -> LinearModel:
    return LinearModel.from_dict(read_json(path))


def _split(cfg: RunConfig, sessions: list[SessionLog]) -> tuple[list[SessionLog], list[SessionLog]]:
    """Seeded train / hold-out split of the sessions."""
    order = np.random.default_rng([cfg.seed, 1]).permutation(len(sessions))
    n_hold = max(1, int(round(cfg.train.holdout_fraction * len(sessions))))
    hold = set(order[:n_hold].tolist())
    train = [s for i, s in enumerate(sessions) if i not in hold]
    holdout = [s for i, s in enumerate(sessions) if i in hold]
    return train, holdout


def _instances(sessions: list[SessionLog]) -> tuple[np.ndarray, np.ndarray]:
    X = [inst.features for s in sessions for b in s.bags for inst in b.instances]
    y = [inst.click for s in sessions for b in s.bags for inst in b.instances]
    return np.vstack(X), np.asarray(y, dtype=np.float64)


def _eval_users(cfg: RunConfig) -> list[UserContext]:
    return generate_users(cfg.sim, first_index=cfg.sim.num_users)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    gt = generate_ground_truth(cfg.sim)
    log_users = generate_users(cfg.sim)
    sessions = generate_sessions(gt, cfg.sim, log_users)
    _write_resolved(cfg, out)
    write_json(cfg, out / GROUND_TRUTH, gt.to_dict())
    write_atomic(out / SESSIONS, sessions_to_jsonl(sessions))
    negatives = sum(1 for s in sessions for b in s.bags if not b.label)
    bags = sum(len(s.bags) for s in sessions)
    meta = {"sessions": len(sessions), "bags": bags, "negative_bags": negatives}
    write_json(cfg, out / SESSIONS_META, meta)
    write_json(cfg, out / USERS, {"users": [u.to_dict() for u in _eval_users(cfg)]})
    return meta


def cmd_train(cfg: RunConfig, out: Path, log_path: Path | None = None) -> dict:
    sessions = sessions_from_jsonl(read_text(log_path or out / SESSIONS))
    gt_path = out / GROUND_TRUTH
    schema = load_ground_truth(gt_path).schema if gt_path.is_file() else ()
    train, holdout = _split(cfg, sessions)
    params = cfg.train_params()

    X, y = _instances(train)
    click = train_click_model(X, y, params, schema)
    mil = fit_mi_svm(train, params, schema)
    no_mil = train_quit_model_no_mil(train, params, schema)

    hold_bags = [b for s in holdout for b in s.bags]
    Xh, yh = _instances(holdout)
    report = {
        "train_sessions": len(train),
        "holdout_sessions": len(holdout),
        "click_auc_holdout": auc(click.score(Xh), yh),
        "mil_outer_iterations": mil.iterations,
        "mil_converged": mil.converged,
        "bag_auc_holdout_mil": bag_level_auc(mil.model, hold_bags),
        "bag_auc_holdout_no_mil": bag_level_auc(no_mil, hold_bags),
    }
    _write_resolved(cfg, out)
    write_json(cfg, out / CLICK_MODEL, click.to_dict())
    write_json(cfg, out / QUIT_MIL, mil.model.to_dict())
    write_json(cfg, out / QUIT_NO_MIL, no_mil.to_dict())
    write_json(cfg, out / "train_report.json", report)
    return report


def _calibrated_name(name: str) -> str:
    return name.replace(".json", ".calibrated.json")


def cmd_calibrate(cfg: RunConfig, out: Path, log_path: Path | None = None) -> dict:
    """Fit Platt parameters on the hold-out split and report binned RMSE.

    Click: instance-level fit on click labels.  Quit: the continue scorer is
    fitted against bag labels through the noisy-OR bag likelihood, and its
    RMSE is measured on bags (predicted probability that the page keeps the
    user).  "Before" maps raw scores through the logistic function.
    """
    sessions = sessions_from_jsonl(read_text(log_path or out / SESSIONS))
    _, holdout = _split(cfg, sessions)
    Xh, yh = _instances(holdout)
    report: dict = {}

    click = load_model(out / CLICK_MODEL)
    f = click.score(Xh)
    cal = fit_platt(f, yh)
    click = click.with_calibration(cal)
    report["click"] = {
        "A": cal.A,
        "B": cal.B,
        "rmse_before": binned_calibration_rmse(special.expit(f), yh, 10),
        "rmse_after": binned_calibration_rmse(click.probability(Xh), yh, 10),
    }
    write_json(cfg, out / _calibrated_name(CLICK_MODEL), click.to_dict())

    bags = [b for s in holdout for b in s.bags]
    labels = np.array([b.label for b in bags], dtype=np.float64)
    for name in (QUIT_MIL, QUIT_NO_MIL):
        model = load_model(out / name)
        scores = [model.score(b.matrix) for b in bags]
        qcal = fit_platt_bags(scores, labels)
        before = [1 - np.prod(1 - special.expit(s)) for s in scores]
        after = [1 - np.prod(1 - model.with_calibration(qcal).probability(b.matrix)) for b in bags]
        report[name.removesuffix(".json")] = {
            "A": qcal.A,
            "B": qcal.B,
            "rmse_before": binned_calibration_rmse(before, labels, 10),
            "rmse_after": binned_calibration_rmse(after, labels, 10),
        }
        write_json(cfg, out / _calibrated_name(name), model.with_calibration(qcal).to_dict())
    _write_resolved(cfg, out)
    write_json(cfg, out / "calibration_report.json", report)
    return report


def _source(cfg: RunConfig, out: Path, gt: GroundTruth, quit_name: str = QUIT_MIL):
    if cfg.eval.source == "truth":
        return gt
    click = load_model(out / _calibrated_name(CLICK_MODEL))
    quit = load_model(out / _calibrated_name(quit_name))
    return TrainedSource(click, quit)


def cmd_plan(cfg: RunConfig, out: Path, mdp_path: Path | None = None, users_path: Path | None = None) -> dict:
    """Plans for a single MDP file, or for every evaluation user."""
    pcfg = PlannerConfig(cfg.planner.beam_size, cfg.planner.dedup)
    strategy = cfg.planner.strategy
    if mdp_path is not None:
        model = MdpModel.from_dict(read_json(mdp_path))
        doc = plan_with(model, strategy, pcfg).to_dict(model.item_ids)
        write_json(cfg, out / "plan.json", doc)
        return doc
    gt = load_ground_truth(out / GROUND_TRUTH)
    users = load_users(users_path or out / USERS)
    source = _source(cfg, out, gt)
    plans = []
    horizon = cfg.sim.horizon
    for u in users:
        model = produce_mdp(gt, u, source, horizon)
        plans.append({"user_id": u.user_id, **plan_with(model, strategy, pcfg).to_dict(model.item_ids)})
    doc = {"strategy": strategy, "horizon": horizon, "dedup": pcfg.dedup, "plans": plans}
    write_json(cfg, out / "plans.json", doc)
    return doc


def _report_mode(cfg: RunConfig) -> dict:
    return {"source": cfg.eval.source, "score_with": cfg.eval.score_with}


def cmd_evaluate(cfg: RunConfig, out: Path) -> evaluation.EvalReport:
    gt = load_ground_truth(out / GROUND_TRUTH)
    users = load_users(out / USERS)
    source = _source(cfg, out, gt)
    report = evaluation.EvalReport(cfg.to_dict(), cfg.seed, _report_mode(cfg))
    for dedup in (False, True):
        rows, failures = evaluation.run_offline_comparison(
            gt,
            users,
            source,
            cfg.eval.horizons,
            cfg.eval.strategies,
            dedup=dedup,
            beam_size=cfg.planner.beam_size,
            score_with=cfg.eval.score_with,
            workers=cfg.eval.workers,
        )
        report.rows += rows
        report.failures += failures
    report.stats = evaluation.dataset_stats(gt, users, source, cfg.eval.stats_list_length)
    write_json(cfg, out / "report.json", report.to_dict())
    table = (
        f"# config_hash = {cfg.hash()}  seed = {cfg.seed}  "
        f"source = {cfg.eval.source}  score_with = {cfg.eval.score_with}\n"
        "## without deduplication\n"
        + evaluation.format_table(report.rows, dedup=False)
        + "## with deduplication\n"
        + evaluation.format_table(report.rows, dedup=True)
    )
    write_atomic(out / "report.txt", table)
    return report


def cmd_noise_sweep(cfg: RunConfig, out: Path) -> dict:
    gt = load_ground_truth(out / GROUND_TRUTH)
    users = load_users(out / USERS)
    levels = list(range(cfg.eval.noise_max + 1))
    curves = evaluation.run_noise_sweep(
        gt,
        users,
        cfg.eval.noise_horizon,
        cfg.eval.strategies,
        levels,
        seed=cfg.seed,
        beam_size=cfg.planner.beam_size,
        workers=cfg.eval.workers,
    )
    doc = {"horizon": cfg.eval.noise_horizon, "levels": levels, "curves": curves}
    write_json(cfg, out / "noise.json", doc)
    csv = f"# config_hash = {cfg.hash()}  seed = {cfg.seed}\n" + evaluation.noise_csv(curves, levels)
    write_atomic(out / "noise.csv", csv)
    return doc


def cmd_stats(cfg: RunConfig, out: Path) -> dict:
    gt = load_ground_truth(out / GROUND_TRUTH)
    users = load_users(out / USERS)
    doc = {
        "truth": evaluation.dataset_stats(gt, users, gt, cfg.eval.stats_list_length),
    }
    if cfg.eval.source == "trained":
        doc["trained"] = evaluation.dataset_stats(gt, users, _source(cfg, out, gt), cfg.eval.stats_list_length)
    write_json(cfg, out / "stats.json", doc)
    return doc


def run_pipeline(cfg: RunConfig, out: Path) -> evaluation.EvalReport:
    """simulate -> train -> calibrate -> evaluate."""
    cmd_simulate(cfg, out)
    cmd_train(cfg, out)
    cmd_calibrate(cfg, out)
    return cmd_evaluate(cfg, out)


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--out", type=Path, help="output directory (overrides run.out)")
    common.add_argument("--strategy", choices=("ssp", "greedy", "beam"))
    common.add_argument("--beam-size", type=int)
    common.add_argument("--dedup", action="store_true", default=None)
    common.add_argument("--horizon", type=int, help="planning horizon (sim.horizon)")
    common.add_argument("--noise-max", type=int)
    common.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mdpssp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate ground truth, logs and users")
    p = sub.add_parser("train", parents=[common], help="train click and quit models")
    p.add_argument("--log", type=Path, help="session log (JSONL)")
    p = sub.add_parser("calibrate", parents=[common], help="Platt-calibrate trained models")
    p.add_argument("--log", type=Path, help="session log (JSONL)")
    p = sub.add_parser("plan", parents=[common], help="plan paths")
    p.add_argument("--mdp", type=Path, help="plan a single MDP JSON file")
    p.add_argument("--users", type=Path, help="user context file")
    sub.add_parser("evaluate", parents=[common], help="strategy comparison report")
    sub.add_parser("noise-sweep", parents=[common], help="noise robustness curves")
    sub.add_parser("stats", parents=[common], help="discrimination and weak-relatedness")
    sub.add_parser("pipeline", parents=[common], help="simulate, train, calibrate, evaluate")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        over[key.strip()] = value
    flag_keys = {
        "seed": "run.seed",
        "out": "run.out",
        "strategy": "planner.strategy",
        "beam_size": "planner.beam_size",
        "dedup": "planner.dedup",
        "horizon": "sim.horizon",
        "noise_max": "eval.noise_max",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr)
        if value is not None:
            over[key] = str(value)
    return over


def _exit_code(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (MissingFileError, FileNotFoundError)):
        return EXIT_MISSING, "missing_file"
    if isinstance(exc, SchemaError):
        return EXIT_SCHEMA, "schema_mismatch"
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config_error"
    if isinstance(exc, (InvalidDataError, DegenerateDataError, InvalidModelError, InvalidPathError)):
        return EXIT_DATA, "invalid_data"
    if isinstance(exc, MdpSspError):
        return EXIT_DATA, "invalid_data"
    return 1, "internal_error"


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config is not None and not args.config.is_file():
            raise MissingFileError(f"missing config file {args.config}")
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.run.out)
        commands: dict[str, Callable[[], object]] = {
            "simulate": lambda: cmd_simulate(cfg, out),
            "train": lambda: cmd_train(cfg, out, args.log),
            "calibrate": lambda: cmd_calibrate(cfg, out, args.log),
            "plan": lambda: cmd_plan(cfg, out, args.mdp, args.users),
            "evaluate": lambda: cmd_evaluate(cfg, out),
            "noise-sweep": lambda: cmd_noise_sweep(cfg, out),
            "stats": lambda: cmd_stats(cfg, out),
            "pipeline": lambda: run_pipeline(cfg, out),
        }
        result = commands[args.command]()
        log.info("%s done -> %s", args.command, out)
        if args.command == "plan" and args.mdp is not None:
            print(json.dumps(result, sort_keys=True))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code, kind = _exit_code(exc)
        record = {"error": kind, "exit_code": code, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
