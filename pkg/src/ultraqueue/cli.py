"""ultraqueue command line: synth, calibrate, train-routing, simulate, validate, report.

Stages talk only through files. Each output gets a manifest holding the
fully resolved configuration, so any run can be repeated from it.
Exit status: 0 success, 1 internal error, 2 bad input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibrationConfig, CalibrationError, build_model, dumps_model, loads_model, with_routing
from .engine import SimConfig, run_replications
from .eventlog import LogFormatError, dumps_log, parse_log
from .forest import Hyperparams
from .metrics import ValidationReport, compare, render_report, write_report
from .routing import evaluation_csv, train_policy
from .synth import SCENARIOS, load_scenario, synthesize_log

log = logging.getLogger("ultraqueue")

MODES = {"jsq": "jsq", "two-level-sample": "sample", "two-level-argmax": "argmax"}


class UserError(Exception):
    """Bad input from the caller; exit status 2."""


def _default_seed() -> int:
    raw = os.environ.get("ULTRAQUEUE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UserError(f"ULTRAQUEUE_SEED must be an integer, got {raw!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _jsonable(obj):
    return asdict(obj) if is_dataclass(obj) else str(obj)


def _manifest(path, command: str, args: argparse.Namespace, inputs: dict, **extra) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    doc = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        **extra,
    }
    _write(path, json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _read_log(path):
    if not Path(path).is_file():
        raise UserError(f"log not found: {path}")
    try:
        parsed = parse_log(path, rooms=None)
    except LogFormatError as e:
        raise UserError(f"malformed log {path}: {e}") from None
    if parsed.rejected:
        rows = ", ".join(str(r.row) for r in parsed.rejected[:20])
        more = "" if len(parsed.rejected) <= 20 else f" (+{len(parsed.rejected) - 20} more)"
        print(f"warning: {len(parsed.rejected)} rows rejected: {rows}{more}", file=sys.stderr)
    return parsed


def _read_model(path):
    if not Path(path).is_file():
        raise UserError(f"model not found: {path}")
    try:
        return loads_model(Path(path).read_text(encoding="utf-8"))
    except (ValueError, KeyError) as e:
        raise UserError(f"invalid model bundle {path}: {e}") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.scenario.startswith("builtin:"):
        name = args.scenario.split(":", 1)[1]
        if name not in SCENARIOS:
            raise UserError(f"scenario not found: {args.scenario} (builtins: {', '.join(sorted(SCENARIOS))})")
        scenario, inputs = SCENARIOS[name](), {}
    else:
        if not Path(args.scenario).is_file():
            raise UserError(f"scenario not found: {args.scenario}")
        try:
            scenario = load_scenario(args.scenario)
        except (ValueError, KeyError, TypeError) as e:
            raise UserError(f"invalid scenario {args.scenario}: {e}") from None
        inputs = {"scenario": args.scenario}
    if args.start_date:
        scenario.start_date = args.start_date
    records = synthesize_log(scenario, args.n_days, args.seed, threads=args.threads)
    _write(args.out, dumps_log(records))
    _manifest(f"{args.out}.manifest.json", "synth", args, inputs, n_records=len(records))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _calibration_config(args) -> CalibrationConfig:
    d = {
        "seed": args.seed,
        "gap_threshold": args.threshold_seconds,
        "n_item_clusters": args.n_item_clusters,
        "n_room_types": args.n_room_types,
        "train_fraction": args.train_fraction,
        "train_routing": not args.skip_routing,
    }
    for key in ("first_level", "second_level", "eligibility", "horizon", "rooms", "gmm_n_init"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    return CalibrationConfig.from_dict(d)


def cmd_calibrate(args) -> int:
    parsed = _read_log(args.log)
    config = _calibration_config(args)
    try:
        model = build_model(parsed.records, config)
    except CalibrationError as e:
        rows = ", ".join(str(r.row) for r in parsed.rejected)
        hint = f" (rejected rows: {rows})" if rows else ""
        raise UserError(f"calibration failed: {e}{hint}") from None
    _write(args.out, dumps_model(model))
    if model.routing is not None and args.report:
        _write(args.report, evaluation_csv(model.routing))
    _manifest(f"{args.out}.manifest.json", "calibrate", args, {"log": args.log},
              n_records=len(parsed.records), n_rejected=len(parsed.rejected))
    print(f"wrote model ({len(model.classes)} classes, {len(model.rooms)} rooms) to {args.out}")
    return 0


def cmd_train_routing(args) -> int:
    parsed = _read_log(args.log)
    model = _read_model(args.model)
    config = _calibration_config(args)
    policy = train_policy(parsed.records, model, config.first_level, config.second_level,
                          seed=args.seed, train_fraction=args.train_fraction)
    _write(args.out, dumps_model(with_routing(model, policy)))
    if args.report:
        _write(args.report, evaluation_csv(policy))
    _manifest(f"{args.out}.manifest.json", "train-routing", args, {"log": args.log, "model": args.model})
    print(evaluation_csv(policy), end="")
    return 0


def cmd_simulate(args) -> int:
    model = _read_model(args.model)
    mode = MODES[args.mode]
    if mode != "jsq" and model.routing is None:
        raise UserError("model has no routing policy; run train-routing or use --mode jsq")
    config = SimConfig(n_replications=args.n_reps, seed=args.seed, mode=mode, breaks=not args.no_breaks,
                       walks=not args.no_walks, start_date=args.start_date, threads=args.threads)
    results = run_replications(model, None, config)
    out = Path(args.out_dir)
    files = []
    for i, res in enumerate(results):
        name = f"rep_{i:04d}.csv"
        _write(out / name, dumps_log(res.records))
        files.append({"file": name, "day_id": res.day_id, "seed": res.seed,
                      "n_records": len(res.records), "unserved": len(res.unserved)})
    _manifest(out / "manifest.json", "simulate", args, {"model": args.model},
              model_path=str(Path(args.model).resolve()), replications=files)
    print(f"wrote {len(results)} replications to {out}")
    return 0


def _report_to_json(rep: ValidationReport) -> dict:
    rows = lambda diffs: [[*d.key, d.sim, d.ref] for d in diffs]
    return {
        "hours": rep.hours,
        "summary": rep.summary(),
        "queue_sim": rep.queue_sim.values,
        "queue_ref": rep.queue_ref.values,
        "n_days": [rep.n_days_sim, rep.n_days_ref],
        "truncated_wait": [rep.truncated_wait_sim, rep.truncated_wait_ref],
        "routing_by_type": rows(rep.routing_by_type),
        "routing_by_room": rows(rep.routing_by_room),
        "wait_sim": rep.wait_sim.astype(int).tolist(),
        "wait_ref": rep.wait_ref.astype(int).tolist(),
        "notes": rep.notes,
    }


def _report_from_json(d: dict) -> ValidationReport:
    from .metrics import CountDiff, QueueLengthCurve

    diffs = lambda rows: [CountDiff(tuple(r[:2]), r[2], r[3]) for r in rows]
    return ValidationReport(
        hours=d["hours"],
        queue_sim=QueueLengthCurve(d["hours"], d["queue_sim"], d["n_days"][0]),
        queue_ref=QueueLengthCurve(d["hours"], d["queue_ref"], d["n_days"][1]),
        wait_sim=np.array(d["wait_sim"], dtype=float),
        wait_ref=np.array(d["wait_ref"], dtype=float),
        ks_wait=d["summary"]["ks_wait"],
        routing_by_type=diffs(d["routing_by_type"]),
        routing_by_room=diffs(d["routing_by_room"]),
        n_days_sim=d["n_days"][0],
        n_days_ref=d["n_days"][1],
        truncated_wait_sim=d["truncated_wait"][0],
        truncated_wait_ref=d["truncated_wait"][1],
        notes=d["notes"],
    )


def cmd_validate(args) -> int:
    sim_dir = Path(args.sim_dir)
    manifest_path = sim_dir / "manifest.json"
    if not manifest_path.is_file():
        raise UserError(f"simulation manifest not found: {manifest_path}")
    if not Path(args.reference).is_file():
        raise UserError(f"reference log not found: {args.reference}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    model = _read_model(args.model or manifest["model_path"])
    sims = [parse_log(sim_dir / rep["file"], rooms=None).records for rep in manifest["replications"]]
    ref = _read_log(args.reference).records
    report = compare(sims, ref, model.room_types.room_type, range(*model.horizon))
    out = Path(args.out_dir)
    _write(out / "validation.json", json.dumps(_report_to_json(report), sort_keys=True) + "\n")
    write_report(render_report(report, args.bin_width), out)
    _manifest(out / "manifest.json", "validate", args, {"reference": args.reference, "sim_manifest": manifest_path})
    for k, v in report.summary().items():
        print(f"{k}: {'undefined' if v is None else f'{v:.6g}'}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.validation)
    if not src.is_file():
        raise UserError(f"validation file not found: {src}")
    report = _report_from_json(json.loads(src.read_text(encoding="utf-8")))
    write_report(render_report(report, args.bin_width), args.out_dir)
    print(f"wrote report tables to {args.out_dir}")
    return 0


# ---------------------------------------------------------------- parser


def _add_calibration_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold-seconds", type=int, default=10, help="break/walk detection threshold")
    p.add_argument("--n-item-clusters", type=_positive, default=5)
    p.add_argument("--n-room-types", type=_positive, default=4)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--report", help="write the routing evaluation CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ultraqueue", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def command(name, func, help):
        p = parser.commands[name] = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a ground-truth log from a scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON path or builtin:<name>")
    p.add_argument("--out", required=True)
    p.add_argument("--n-days", type=_positive, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--start-date")
    p.add_argument("--threads", type=int, default=1)

    p = command("calibrate", cmd_calibrate, "estimate a model bundle from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-routing", action="store_true", help="leave routing for train-routing")
    _add_calibration_flags(p)

    p = command("train-routing", cmd_train_routing, "(re)train the two-level routing forests")
    p.add_argument("--log", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_calibration_flags(p)
    p.set_defaults(skip_routing=False)

    p = command("simulate", cmd_simulate, "run replications of a calibrated model")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="two-level-sample")
    p.add_argument("--n-reps", type=_positive, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--start-date", default=SimConfig.start_date)
    p.add_argument("--no-breaks", action="store_true")
    p.add_argument("--no-walks", action="store_true")

    p = command("validate", cmd_validate, "compare simulated days with a reference log")
    p.add_argument("--sim-dir", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", help="defaults to the model named in the simulation manifest")
    p.add_argument("--bin-width", type=float, default=5.0, help="waiting-time histogram bin, minutes")

    p = command("report", cmd_report, "re-render report tables from validation.json")
    p.add_argument("--validation", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bin-width", type=float, default=5.0)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config not found: {path}")
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UserError(f"config {path} is not valid JSON: {e}") from None
        # file values become defaults, so explicit flags still win
        parser.commands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
        args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None:
        args.seed = _default_seed()
    for key in ("first_level", "second_level"):
        v = getattr(args, key, None)
        if key == "first_level" and isinstance(v, dict):
            args.first_level = Hyperparams(**v)
        elif key == "second_level" and isinstance(v, dict):
            args.second_level = {t: Hyperparams(**hp) for t, hp in v.items()}
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort report for defects
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
