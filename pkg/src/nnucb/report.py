"""Per-step run logs: CSV emission/parsing, plot data, and trace verification.

CSV header (fixed order, one row per step)::

    t,chosen_action,reward,instant_regret,cum_regret,ucb_max,post_std_chosen,
    info_gain_increment,info_gain_cum,sup_level,psi_sizes,branch,candidates,beta,wall_ms

Floats are written with ``repr`` so a reload reproduces them exactly. Optional
fields are empty when absent. ``psi_sizes`` lists |Psi^(s)| for s = 1..S
separated by spaces; ``candidates`` lists the active action sets A_1, A_2, ...
visited during the step, separated by ``|``, actions separated by spaces.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

FIELDS = ("t", "chosen_action", "reward", "instant_regret", "cum_regret", "ucb_max",
          "post_std_chosen", "info_gain_increment", "info_gain_cum", "sup_level", "psi_sizes",
          "branch", "candidates", "beta", "wall_ms")
HEADER = ",".join(FIELDS)


@dataclass
class StepLog:
    t: int
    chosen_action: int
    reward: float
    instant_regret: float
    cum_regret: float
    ucb_max: float
    post_std_chosen: float
    info_gain_increment: float
    info_gain_cum: float
    sup_level: int | None = None
    psi_sizes: tuple[int, ...] | None = None
    branch: str = "ucb"
    candidates: tuple[tuple[int, ...], ...] | None = None
    beta: float = 0.0
    wall_ms: float | None = None


def _fmt(name: str, value) -> str:
    if value is None:
        return ""
    if name == "psi_sizes":
        return " ".join(str(v) for v in value)
    if name == "candidates":
        return "|".join(" ".join(str(a) for a in level) for level in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_INTS = ("t", "chosen_action", "sup_level")


def _parse(name: str, text: str):
    if name == "branch":
        return text
    if text == "":
        if name in ("sup_level", "psi_sizes", "candidates", "wall_ms"):
            return None
        raise ValueError("empty value")
    if name in _INTS:
        return int(text)
    if name == "psi_sizes":
        return tuple(int(v) for v in text.split())
    if name == "candidates":
        return tuple(tuple(int(a) for a in level.split()) for level in text.split("|"))
    return float(text)


def log_rows(log) -> list[list[str]]:
    return [[_fmt(f, getattr(row, f)) for f in FIELDS] for row in log]


def emit_csv(log, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            w.writerows(log_rows(log))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_csv(path) -> list[StepLog]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FIELDS:
            raise FormatError(f"{path}: header does not match {HEADER}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(FIELDS):
                raise FormatError(f"{path}:{lineno}: expected {len(FIELDS)} fields, got {len(row)}")
            try:
                out.append(StepLog(**{f: _parse(f, v) for f, v in zip(FIELDS, row)}))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def downsample_indices(n: int, k: int) -> np.ndarray:
    """At most k indices spread evenly over range(n), always keeping 0 and n - 1."""
    if n == 0:
        return np.zeros(0, dtype=int)
    if k >= n:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, max(k, 2))).astype(int))


def emit_plotdata(log, path, n_points: int = 200,
                  metrics=("cum_regret", "info_gain_cum")) -> None:
    """Downsampled (t, metric...) table for external plotting."""
    idx = downsample_indices(len(log), n_points)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t",) + tuple(metrics))
            for i in idx:
                row = log[i]
                w.writerow([row.t] + [repr(float(getattr(row, m))) for m in metrics])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# trace verification


@dataclass
class TraceReport:
    results: dict[str, bool] = field(default_factory=dict)
    messages: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.results.values())

    def check(self, name: str, ok: bool, message: str = "") -> None:
        if name not in self.results or self.results[name]:
            self.results[name] = bool(ok)
            if not ok:
                self.messages[name] = message

    def failed(self) -> list[str]:
        return [k for k, v in self.results.items() if not v]

    def lines(self) -> list[str]:
        out = []
        for name, ok in self.results.items():
            tail = f"  ({self.messages[name]})" if name in self.messages else ""
            out.append(f"{'PASS' if ok else 'FAIL'} {name}{tail}")
        return out


def verify_trace(log, cfg) -> TraceReport:
    """Replay structural invariants from a log.

    Always checked: prefix sums of regret and information gain. For Sup
    variants additionally: one level per recorded step and Psi sizes matching
    a replay (disjointness), A_{s+1} subset of A_s starting from all actions
    (nesting), the recording inequality sqrt(beta) std > sigma 2^{-s} on
    explore steps, the UCB-branch width threshold, and termination within S
    levels.
    """
    from .config import SUP_ALGOS
    from .policies import sup_levels

    rep = TraceReport()
    names = ["prefix_sums"]
    sup = cfg.algorithm in SUP_ALGOS
    if sup:
        names += ["disjoint_psi", "nested_candidates", "recording_inequality",
                  "ucb_threshold", "termination"]
    for n in names:
        rep.results[n] = True

    cum_r = cum_i = 0.0
    for row in log:
        cum_r += row.instant_regret
        cum_i += row.info_gain_increment
        rep.check("prefix_sums", abs(cum_r - row.cum_regret) <= 1e-9 * max(1.0, abs(cum_r)),
                  f"cum_regret mismatch at t={row.t}")
        rep.check("prefix_sums", abs(cum_i - row.info_gain_cum) <= 1e-9 * max(1.0, abs(cum_i)),
                  f"info_gain_cum mismatch at t={row.t}")
    if not sup:
        return rep

    S = sup_levels(cfg.T, "ntk" if cfg.algorithm == "sup_ntk_ucb" else "nn")
    sigma = math.sqrt(cfg.noise_var)
    top = sigma / math.sqrt(cfg.T) if cfg.algorithm == "sup_ntk_ucb" else sigma / cfg.T ** 2
    n_actions = None
    counts = [0] * S
    n_explore = n_ucb = 0
    for row in log:
        s = row.sup_level
        rep.check("termination", s is not None and 1 <= s <= S,
                  f"level {s} outside [1, {S}] at t={row.t}")
        if s is None or not 1 <= s <= S:
            continue
        width = math.sqrt(row.beta) * row.post_std_chosen
        if row.branch == "explore":
            n_explore += 1
            counts[s - 1] += 1
            rep.check("recording_inequality", width > sigma * 2.0 ** (-s),
                      f"t={row.t}: sqrt(beta) std = {width!r} <= {sigma * 2.0 ** (-s)!r} at level {s}")
        elif row.branch == "ucb":
            n_ucb += 1
            rep.check("ucb_threshold", width <= top * (1 + 1e-12),
                      f"t={row.t}: UCB branch with width {width!r} > {top!r}")
        else:
            rep.check("disjoint_psi", False, f"t={row.t}: unknown branch {row.branch!r}")
        rep.check("disjoint_psi", row.psi_sizes is not None and list(row.psi_sizes) == counts,
                  f"t={row.t}: psi sizes {row.psi_sizes} != replay {counts}")

        cands = row.candidates or ()
        if n_actions is None and cands:
            n_actions = max(cands[0]) + 1
        ok = (len(cands) == s and cands and list(cands[0]) == list(range(n_actions))
              and all(set(b) <= set(a) for a, b in zip(cands, cands[1:]))
              and row.chosen_action in cands[-1])
        rep.check("nested_candidates", bool(ok), f"t={row.t}: candidate sets {cands} not nested")
    rep.check("disjoint_psi", sum(counts) + n_ucb == len(log),
              f"|union psi| + UCB steps = {sum(counts) + n_ucb} != {len(log)}")
    return rep


def log_to_dicts(log) -> list[dict]:
    return [dataclasses.asdict(r) for r in log]
