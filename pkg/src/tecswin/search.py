"""Staged timestep schedules, greedy per-stage substep search, and scalar scans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class StageSchedule:
    """Denoising trajectory split into stages, each with its own substep count.

    ``boundaries`` runs from T down to 0 (stage 0 is the noisiest). Inside
    stage i the ``substeps[i]`` timesteps are evenly spaced from the stage's
    upper boundary toward its lower one; the realised sequence ends with 0.
    """

    T: int
    boundaries: tuple[int, ...]
    substeps: tuple[int, ...]

    def __post_init__(self):
        b, n = tuple(int(v) for v in self.boundaries), tuple(int(v) for v in self.substeps)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "substeps", n)
        if len(b) != len(n) + 1 or not n:
            raise ValueError("need len(boundaries) == len(substeps) + 1 >= 2")
        if b[0] != self.T or b[-1] != 0 or any(x <= y for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must decrease strictly from T to 0")
        for i, k in enumerate(n):
            if not 1 <= k <= b[i] - b[i + 1]:
                raise ValueError(f"stage {i} substeps {k} outside [1, {b[i] - b[i + 1]}]")

    @property
    def num_stages(self) -> int:
        return len(self.substeps)

    @property
    def total_steps(self) -> int:
        return sum(self.substeps)

    def stage_width(self, i: int) -> int:
        return self.boundaries[i] - self.boundaries[i + 1]

    def timesteps(self) -> list[int]:
        out = []
        for i, n in enumerate(self.substeps):
            hi, lo = self.boundaries[i], self.boundaries[i + 1]
            out.extend(hi - int(round(k * (hi - lo) / n)) for k in range(n))
        out.append(0)
        return out

    def timesteps_on(self, T_target: int) -> list[int]:
        """Realised timesteps rescaled onto a finer grid of ``T_target`` steps."""
        if T_target == self.T:
            return self.timesteps()
        if T_target < self.T:
            raise ValueError(f"cannot map a {self.T}-step schedule onto a coarser {T_target}-step grid")
        return [int(round(t * T_target / self.T)) for t in self.timesteps()]

    def with_substeps(self, stage: int, n: int) -> "StageSchedule":
        subs = list(self.substeps)
        subs[stage] = n
        return StageSchedule(self.T, self.boundaries, tuple(subs))

    def to_dict(self) -> dict:
        return {"T": self.T, "boundaries": list(self.boundaries), "substeps": list(self.substeps)}

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        return cls(d["T"], tuple(d["boundaries"]), tuple(d["substeps"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StageSchedule":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_staged_schedule(T: int, stages: int, substeps: Sequence[int] | int) -> StageSchedule:
    """Uniform stage boundaries over [T..0]; boundaries are rounded when T is not a multiple of ``stages``."""
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if isinstance(substeps, (int, np.integer)):
        substeps = [int(substeps)] * stages
    substeps = list(substeps)
    if not substeps:
        raise ValueError("substeps must be non-empty")
    if len(substeps) != stages:
        raise ValueError(f"got {len(substeps)} substep counts for {stages} stages")
    bounds = tuple(int(round(T * (stages - i) / stages)) for i in range(stages + 1))
    return StageSchedule(T, bounds, tuple(substeps))


class SearchError(RuntimeError):
    def __init__(self, stage: int | None, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class SearchReport:
    initial: StageSchedule
    final: StageSchedule
    initial_metric: float
    final_metric: float
    trials: list[dict] = field(default_factory=list)
    trajectory: list[float] = field(default_factory=list)

    def write_log(self, path) -> None:
        """Line-delimited JSON: one line per trial, then a summary line."""
        with open(path, "w", encoding="utf-8") as fh:
            for trial in self.trials:
                fh.write(json.dumps(trial, sort_keys=True) + "\n")
            fh.write(json.dumps({"final": self.final.to_dict(), "initial_metric": self.initial_metric,
                                 "final_metric": self.final_metric, "trajectory": self.trajectory},
                                sort_keys=True) + "\n")


def greedy_substep_search(metric: Callable[[StageSchedule], float], base: StageSchedule,
                          candidates: Iterable[int], passes: int = 1,
                          map_fn: Callable = map) -> SearchReport:
    """Coordinate descent over stage substep counts, stage 0 first.

    For each stage every candidate is tried with the other stages fixed at
    the current best; a candidate replaces the incumbent only if it is
    strictly better, so the best metric never increases. Candidates that do
    not fit in a stage are skipped. ``map_fn`` may evaluate one stage's
    candidates concurrently (e.g. ``executor.map``).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidates must be non-empty")

    def evaluate(stage, sched):
        try:
            value = float(metric(sched))
        except Exception as exc:
            raise SearchError(stage, f"metric failed: {exc}") from exc
        if not np.isfinite(value):
            raise SearchError(stage, f"metric returned {value}")
        return value

    best = base
    best_val = evaluate(None, base)
    report = SearchReport(base, base, best_val, best_val, trajectory=[best_val])
    for p in range(passes):
        for i in range(base.num_stages):
            current = best.substeps[i]
            todo = [c for c in candidates if c != current and 1 <= c <= best.stage_width(i)]
            values = list(map_fn(lambda c, i=i, b=best: evaluate(i, b.with_substeps(i, c)), todo))
            stage_val, stage_choice = best_val, current
            report.trials.append({"pass": p, "stage": i, "substeps": current, "metric": best_val,
                                  "incumbent": True})
            for c, v in zip(todo, values):
                report.trials.append({"pass": p, "stage": i, "substeps": c, "metric": v, "incumbent": False})
                if v < stage_val:
                    stage_val, stage_choice = v, c
            best = best.with_substeps(i, stage_choice)
            best_val = stage_val
            report.trajectory.append(best_val)
    report.final, report.final_metric = best, best_val
    return report


def parse_grid(spec: str) -> list[float]:
    """``"lo:hi:step"`` (inclusive) or a comma-separated list."""
    if ":" in spec:
        lo, hi, step = (float(v) for v in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad grid {spec!r}")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + k * step, 10) for k in range(n)]
    return [float(v) for v in spec.split(",") if v.strip()]


def parse_int_range(spec: str) -> list[int]:
    """``"5..15"`` or ``"5,8,10"``."""
    if ".." in spec:
        lo, hi = (int(v) for v in spec.split(".."))
        return list(range(lo, hi + 1))
    return [int(v) for v in spec.split(",") if v.strip()]


def scan_scalar(metric: Callable[[float], float], grid: Sequence[float]) -> tuple[float, list[tuple[float, float]]]:
    """Evaluate ``metric`` on every grid point; returns the first argmin and the full table."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    table = [(x, float(metric(x))) for x in grid]
    best = min(table, key=lambda row: row[1])[0]
    return best, table
