"""Command-line entry point: simulate, train, run, score, embed and report.

Every verb that draws random numbers takes them from the single global
``--seed``. JSON outputs are written with sorted keys and no timing fields so
repeated invocations are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from .evaluation.analysis import embed_sessions, endpoint_ratio, history_csv, path_length, residual_history
from .evaluation.metrics import Trajectory
from .evaluation.runner import METHODS, metrics_report, network_motion_errors, run_scenario
from .evaluation.scenarios import challenge_scenario, nominal_scenario, training_sequences
from .fusion.smoother import SmootherConfig
from .network import NeuralModel
from .sim.config import ScenarioConfig
from .sim.gait import BASE_RATE
from .sim.io import read_stream, write_stream
from .sim.sensors import simulate
from .training import TrainConfig, train_offline

log = logging.getLogger("tactile_lio")
ESTIMATE_SCHEMA = "tactile-lio/estimates/1"
SCENARIOS = {"nominal": nominal_scenario, "challenge": challenge_scenario}


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _scenario(args) -> ScenarioConfig:
    if args.config:
        cfg = ScenarioConfig.from_dict(_load_json(args.config))
        return cfg.with_seed(args.seed)
    cfg = SCENARIOS[args.scenario](args.seed)
    if args.duration is not None:
        cfg = replace(cfg, duration=args.duration)
    return cfg


def cmd_simulate(args):
    cfg = _scenario(args)
    write_stream(simulate(cfg), args.out)
    log.info("wrote %s (%.1f s, seed %d)", args.out, cfg.duration, cfg.seed)


def cmd_train(args):
    sequences = training_sequences(args.seed, args.duration)
    config = TrainConfig(epochs=args.epochs, seed=args.seed, tactile=not args.no_tactile, nominal=args.nominal)
    model = train_offline(sequences, config)
    model.save(args.out)
    log.info("wrote %s, final loss %.5f", args.out, model.report["epoch_loss"][-1])


def write_estimates(path, run, stream, config: SmootherConfig):
    header = {"schema": ESTIMATE_SCHEMA, "method": run.method, "scenario": stream.config.to_dict(),
              "smoother": config.to_dict()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in run.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_estimates(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != ESTIMATE_SCHEMA:
            raise ValueError(f"not a {ESTIMATE_SCHEMA} file: {path}")
        rows = [json.loads(line) for line in fh if line.strip()]
    return header, rows


def estimate_trajectory(rows) -> Trajectory:
    return Trajectory(np.array([r["t"] for r in rows]), np.array([r["rotation"] for r in rows]),
                      np.array([r["position"] for r in rows]))


def cmd_run(args):
    stream = read_stream(args.stream)
    model = NeuralModel.load(args.model) if args.model else None
    config = SmootherConfig.from_dict(_load_json(args.smoother)) if args.smoother else SmootherConfig()
    run = run_scenario(stream, args.method, model, config)
    write_estimates(args.out, run, stream, config)
    if args.report:
        _dump(run.report, args.report)
    log.info("%s: ATE %.4f m in %.1f s", args.method, run.report["ate"]["mean"], run.seconds)


def cmd_metrics(args):
    stream = read_stream(args.stream)
    header, rows = read_estimates(args.estimates)
    report = metrics_report(estimate_trajectory(rows), stream)
    report["method"] = header["method"]
    _dump(report, args.out)


def _m_history(path):
    _, rows = read_estimates(path)
    m = [r["m_on"] for r in rows if r["m_on"] is not None]
    if not m:
        raise ValueError(f"{path} has no online parameters")
    return np.array(m)


def cmd_embed(args):
    histories = [_m_history(p) for p in args.estimates]
    paths = embed_sessions(histories)
    out = {"sessions": [{"source": p, "points": pts.tolist(), "path_length": path_length(pts)}
                        for p, pts in zip(args.estimates, paths)]}
    if len(paths) == 2:
        out["endpoint_ratio"] = endpoint_ratio(*paths)
    _dump(out, args.out)


def cmd_report(args):
    """Network-only motion errors with the run's m_on history against the frozen initial m_on."""
    stream = read_stream(args.stream)
    model = NeuralModel.load(args.model)
    _, rows = read_estimates(args.estimates)
    # the parameters in force before each window's own keyframe was fused
    m_rows = np.array([rows[k + 1]["m_on"] for k in range(len(rows) - 2)])
    online = network_motion_errors(stream, model, m_rows)
    frozen = network_motion_errors(stream, model, np.tile(model.initial_online(), (len(m_rows), 1)))
    times = stream.keyframe_ticks()[2:] / BASE_RATE
    with open(args.out, "w") as fh:
        fh.write(history_csv(residual_history(times, online, frozen, args.window)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactile-lio", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="scenario config -> sensor stream JSONL")
    s.add_argument("--scenario", choices=sorted(SCENARIOS), default="nominal")
    s.add_argument("--config", help="scenario JSON (overrides --scenario)")
    s.add_argument("--duration", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-offline", help="simulate the training set and fit a model blob")
    s.add_argument("--epochs", type=int, default=2500)
    s.add_argument("--duration", type=float, default=120.0, help="seconds per training sequence")
    s.add_argument("--no-tactile", action="store_true")
    s.add_argument("--nominal", default="rigid-0kg", help="sequence whose m_on seeds online learning")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", help="stream + model + method -> estimates JSONL and metrics JSON")
    s.add_argument("--stream", required=True)
    s.add_argument("--method", choices=METHODS, default="ours")
    s.add_argument("--model")
    s.add_argument("--smoother", help="smoother config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("metrics", help="score an estimates file against its stream")
    s.add_argument("--stream", required=True)
    s.add_argument("--estimates", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("embed", help="PCA embedding of m_on histories")
    s.add_argument("--estimates", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("report", help="network-only motion error history CSV")
    s.add_argument("--stream", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--estimates", required=True)
    s.add_argument("--window", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
