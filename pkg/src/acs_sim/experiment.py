"""Experiment configuration, dispatch and deterministic report files."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

from . import attacks, games
from .machine import Scheme
from .pac import PointerLayout
from .stats import TrialReport

ATTACKS = ("reuse-sp", "on-graph", "off-graph-callsite", "off-graph-arbitrary",
           "fork-bruteforce", "signing-gadget", "setjmp-forgery", "sigreturn-forgery")
GAMES = ("pac-collision", "acs")

REPORT_KEYS = ("config", "n_trials", "successes", "rate", "ci_low", "ci_high",
               "mean_guesses", "mean_harvested", "analytic_ref", "verdict")


@dataclass
class ExperimentConfig:
    name: str
    b: int = 16
    va_size: int = 39
    scheme: str = "acs-full"
    trials: int = 1000
    q: Optional[int] = None
    seed: int = 0
    process_model: str = "strict"
    format: str = "json"
    tolerance: Optional[float] = None  # SEs for rates, relative for means
    ci_level: float = 0.95
    masked: Optional[bool] = None
    reseeded: bool = False
    max_guesses: Optional[int] = None
    cr_writable: bool = False
    adversary: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.name not in ATTACKS + GAMES:
            raise ValueError(f"unknown experiment {self.name!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.format not in ("json", "csv"):
            raise ValueError("format must be json or csv")
        if self.process_model not in ("strict", "lenient"):
            raise ValueError("process model must be strict or lenient")
        if self.seed is None:
            raise ValueError("a master seed is required")
        self.layout  # validates b against va_size
        Scheme.parse(self.scheme)

    @property
    def layout(self) -> PointerLayout:
        return PointerLayout(va_size=self.va_size, pac_bits=self.b)


def _factory(cfg: ExperimentConfig, program) -> attacks.MachineFactory:
    return attacks.MachineFactory(program, Scheme.parse(cfg.scheme), cfg.layout,
                                  process_model=cfg.process_model, cr_writable=cfg.cr_writable)


def execute(cfg: ExperimentConfig) -> TrialReport:
    n, w = cfg.trials, cfg.workers
    if cfg.name in attacks.DEFAULT_PROGRAMS:
        fac = _factory(cfg, attacks.DEFAULT_PROGRAMS[cfg.name]())
    masked = cfg.masked if cfg.masked is not None else Scheme.parse(cfg.scheme) is Scheme.ACS_FULL
    if cfg.name == "reuse-sp":
        rep = attacks.attack_reuse_sp_modifier(fac, n, cfg.seed, w)
    elif cfg.name == "on-graph":
        rep = attacks.attack_on_graph(fac, masked, cfg.q, n, cfg.seed, w)
    elif cfg.name == "off-graph-callsite":
        rep = attacks.attack_off_graph(fac, "call_site", n, cfg.seed, w)
    elif cfg.name == "off-graph-arbitrary":
        rep = attacks.attack_off_graph(fac, "arbitrary", n, cfg.seed, w)
    elif cfg.name == "fork-bruteforce":
        rep = attacks.attack_fork_bruteforce(fac, cfg.reseeded, cfg.max_guesses, n, cfg.seed, w)
    elif cfg.name == "signing-gadget":
        rep = attacks.attack_signing_gadget(fac, n, cfg.seed, workers=w)
    elif cfg.name == "setjmp-forgery":
        rep = attacks.attack_setjmp_forgery(fac, n, cfg.seed, w)
    elif cfg.name == "sigreturn-forgery":
        rep = attacks.attack_sigreturn_forgery(fac, n, cfg.seed, w)
    elif cfg.name == "pac-collision":
        q = cfg.q if cfg.q is not None else min(2 ** cfg.b, 64)
        rep = games.game_pac_collision(cfg.layout, q, bool(cfg.masked), n, cfg.seed,
                                       cfg.adversary or "heuristic", w)
    else:
        q = cfg.q if cfg.q is not None else 32
        rep = games.game_acs(None, q, n, cfg.seed, cfg.layout,
                             masked if cfg.masked is None else cfg.masked,
                             cfg.adversary or ("best" if q else "blind"), w)
    if cfg.tolerance is not None and rep.compare != "none":
        rep.tolerance = cfg.tolerance
        rep.verdict = rep.judge()
    return rep


def _clean(v):
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return None
        return float(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def report_body(cfg: ExperimentConfig, rep: TrialReport) -> dict:
    d = rep.as_dict()
    body = {"config": asdict(cfg)}
    body.update(d)
    return _clean(body)


def render(cfg: ExperimentConfig, body: dict) -> str:
    if cfg.format == "json":
        return json.dumps(body, indent=2, sort_keys=True) + "\n"
    flat = {k: v for k, v in body.items() if k != "config"}
    flat.update({f"config.{k}": v for k, v in body["config"].items()})
    buf = io.StringIO()
    cols = sorted(flat)
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    wr.writerow(["" if flat[c] is None else flat[c] for c in cols])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> Tuple[dict, int]:
    """Run, optionally write the report, and return ``(body, exit_status)``.

    The exit status is 0 unless a comparison against the analytic reference
    failed.
    """
    if out:
        parent = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
            raise OSError(f"cannot write report to {out}")
    rep = execute(cfg)
    body = report_body(cfg, rep)
    if out:
        with open(out, "w") as fh:
            fh.write(render(cfg, body))
    return body, 0 if rep.verdict in (True, None) else 1
