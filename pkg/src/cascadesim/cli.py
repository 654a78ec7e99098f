"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error.  Outputs are written
to a temporary file and renamed into place, so a failing command leaves no
partial artifact behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .dpp import GuidanceSchedule
from .pipeline import (TrainConfig, cascaded_inference, closed_loop_simulate, dumps_rollouts,
                       evaluate_rollouts, loads_rollouts, train_toy)
from .plotting import render_svg
from .scenario import TOPOLOGIES, dumps_scenario, loads_scenario, synth_scenario
from .serialization import dumps_bundle, loads_bundle

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
COMMANDS = ("gen-data", "train", "simulate", "evaluate", "plot")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    scenario: list = field(default_factory=list)
    models: str | None = None
    rollouts: str | None = None
    out: str | None = None
    n: int = 4
    m: int = 8
    gamma_world: float = 0.0
    gamma_motion: float = 0.0
    seed: int = 0
    lam: float = 0.2
    delta: int = 10
    kf: int = 50
    replan_hz: int = 1
    sim_hz: int = 10
    total_s: float = 8.0
    closed_loop: bool = False
    agents: int = 4
    topology: str = "straight"
    horizon: int = 80

    def validate(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        checks = [("--n", self.n >= 1), ("--m", self.m >= 1), ("--lambda", self.lam >= 0),
                  ("--gamma-world", self.gamma_world >= 0),
                  ("--gamma-motion", self.gamma_motion >= 0), ("--delta", self.delta >= 1),
                  ("--kf", self.kf >= 1), ("--replan-hz", self.replan_hz >= 1),
                  ("--sim-hz", self.sim_hz >= 1), ("--agents", self.agents >= 1),
                  ("--horizon", self.horizon >= 1), ("--total-s", self.total_s > 0)]
        for flag, ok in checks:
            if not ok:
                raise UsageError(f"{flag} is out of range")
        if self.sim_hz % self.replan_hz:
            raise UsageError("--sim-hz must be a multiple of --replan-hz")
        if self.out is None:
            raise UsageError("--out is required")
        needs = {"train": ("scenario",), "simulate": ("scenario", "models"),
                 "evaluate": ("scenario", "rollouts"), "plot": ("scenario",)}
        for name in needs.get(self.command, ()):
            if not getattr(self, name):
                raise UsageError(f"--{name} is required for {self.command}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadesim",
                                description="Cascaded diversity-guided traffic simulation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", nargs="+", default=[], metavar="PATH",
                   help="scenario JSON (train accepts several)")
    p.add_argument("--models", metavar="PATH", help="model bundle file")
    p.add_argument("--rollouts", metavar="PATH", help="rollout set JSON (evaluate, plot)")
    p.add_argument("--out", metavar="PATH", help="output path")
    p.add_argument("--n", type=int, default=4, help="world rollouts")
    p.add_argument("--m", type=int, default=8, help="motion samples per world rollout")
    p.add_argument("--gamma-world", type=float, default=0.0)
    p.add_argument("--gamma-motion", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2, help="motion weight")
    p.add_argument("--delta", type=int, default=10, help="context pooling stride")
    p.add_argument("--kf", type=int, default=50, help="diffusion steps")
    p.add_argument("--replan-hz", type=int, default=1)
    p.add_argument("--sim-hz", type=int, default=10)
    p.add_argument("--total-s", type=float, default=8.0)
    p.add_argument("--closed-loop", action="store_true", help="simulate in closed loop")
    p.add_argument("--agents", type=int, default=4, help="gen-data agent count")
    p.add_argument("--topology", choices=TOPOLOGIES, default="straight")
    p.add_argument("--horizon", type=int, default=80, help="gen-data future frames")
    return p


def _write_atomic(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def run(cfg: RunConfig) -> int:
    """Execute one command; raises UsageError or data errors."""
    cfg.validate()
    if cfg.command == "gen-data":
        sc = synth_scenario(cfg.seed, cfg.agents, cfg.topology, horizon=cfg.horizon)
        _write_atomic(cfg.out, dumps_scenario(sc))
        return EXIT_OK
    scenarios = [loads_scenario(_read(p)) for p in cfg.scenario]
    sc = scenarios[0]
    if cfg.command == "train":
        tc = TrainConfig(lam=cfg.lam, stride=cfg.delta, kf=cfg.kf, seed=cfg.seed)
        _write_atomic(cfg.out, dumps_bundle(train_toy(scenarios, tc)))
        return EXIT_OK
    if cfg.command == "simulate":
        models = loads_bundle(_read(cfg.models))
        gw = GuidanceSchedule(cfg.gamma_world)
        gm = GuidanceSchedule(cfg.gamma_motion)
        if cfg.closed_loop:
            res = closed_loop_simulate(sc, models, cfg.replan_hz, cfg.sim_hz, cfg.total_s,
                                       cfg.n, cfg.m, "best_Q", gw, gm, cfg.seed)
            doc = {"format": "cascadesim-closed-loop", "version": 1, "dt": sc.dt,
                   "n_agents": sc.n_agents, "states": res.states.reshape(-1).tolist(),
                   "steps": int(res.states.shape[1] - 1), "replans": res.logs}
            _write_atomic(cfg.out, json.dumps(doc, sort_keys=True))
            return EXIT_OK
        rs = cascaded_inference(sc, models, cfg.n, cfg.m, gw, gm, cfg.seed)
        rs.metrics = evaluate_rollouts(rs, sc) if sc.future is not None and \
            sc.future.shape[1] == rs.horizon else None
        _write_atomic(cfg.out, dumps_rollouts(rs))
        return EXIT_OK
    if cfg.command == "evaluate":
        rs = loads_rollouts(_read(cfg.rollouts))
        report = evaluate_rollouts(rs, sc)
        report["config"] = {"n": rs.n, "m": rs.m, "dt": rs.dt, "seed": cfg.seed}
        _write_atomic(cfg.out, json.dumps(report, sort_keys=True, indent=1))
        return EXIT_OK
    rs = loads_rollouts(_read(cfg.rollouts)) if cfg.rollouts else None
    _write_atomic(cfg.out, render_svg(sc, rs))
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cfg = RunConfig(**vars(ns))
    try:
        return run(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cascadesim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"cascadesim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
