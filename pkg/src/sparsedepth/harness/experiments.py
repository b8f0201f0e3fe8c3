"""Density sweep and lidar-layer ablation over a fixed held-out scene set.

Scene ``i`` of the held-out set is always sparsified with pattern seed
``seed + i``; each row records the pattern text and ``seed`` so that any
number can be replayed. Uniform masks at different densities share one
random field, so a sparser mask is a subset of a denser one.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

from ..depth_grid import DEFAULT_D_MAX
from ..objective import MetricsReport
from ..sparsifier import LidarBands, Uniform, describe
from .data import ScenePool, held_out_pool
from .evaluate import evaluate_depth

DENSITY_GRID = (0.02, 0.05, 0.1, 0.3, 0.5, 0.8)
LIDAR_LAYERS = (8, 16, 32, 64)
DEFAULT_EVAL_SCENES = 64


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)  # dicts: net, condition, pattern, seed, report
    loss_curves: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    HEADER = ("net", "condition", "pattern", "seed", "n_scenes") + MetricsReport.CSV_HEADER

    def add(self, net: str, condition: str, pattern: str, seed: int, n_scenes: int, report: MetricsReport):
        self.rows.append({"net": net, "condition": condition, "pattern": pattern, "seed": seed,
                          "n_scenes": n_scenes, "report": report})

    def value(self, net: str, condition: str, metric: str = "imae") -> float:
        for r in self.rows:
            if r["net"] == net and r["condition"] == condition:
                return getattr(r["report"], metric)
        raise KeyError((net, condition))

    def series(self, net: str, metric: str = "imae") -> list[tuple[str, float]]:
        return [(r["condition"], getattr(r["report"], metric)) for r in self.rows if r["net"] == net]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r["net"], r["condition"], r["pattern"], r["seed"], r["n_scenes"]] + r["report"].csv_row())
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _named(nets) -> list[tuple[str, object]]:
    if isinstance(nets, dict):
        return list(nets.items())
    return [x if isinstance(x, tuple) else (f"net{i}", x) for i, x in enumerate(nets)]


def _run(nets, conditions, pool: ScenePool, seed: int, d_max: float, eval_on: str) -> ExperimentResult:
    t0 = time.perf_counter()
    pool = held_out_pool(DEFAULT_EVAL_SCENES) if pool is None else pool
    res = ExperimentResult()
    for cond, make in conditions:
        patterns = [make(seed + i) for i in range(len(pool))]
        for name, model in _named(nets):
            report = evaluate_depth(model, pool, patterns, d_max, eval_on)
            res.add(name, cond, describe(patterns[0]).split("@")[0], seed, len(pool), report)
    res.wall_clock = time.perf_counter() - t0
    return res


def experiment_density_sweep(nets, densities=DENSITY_GRID, pool: ScenePool | None = None, seed: int = 0,
                             d_max: float = DEFAULT_D_MAX, eval_on: str = "all") -> ExperimentResult:
    """Evaluate every net at every uniform density on one fixed held-out set."""
    for d in densities:
        if not 0 < d <= 1:
            raise ValueError(f"densities must lie in ]0, 1], got {d}")
    conditions = [(f"density={d:g}", lambda s, d=d: Uniform(d, s)) for d in densities]
    return _run(nets, conditions, pool, seed, d_max, eval_on)


def experiment_lidar_ablation(nets, layers=LIDAR_LAYERS, pool: ScenePool | None = None, seed: int = 0,
                              d_max: float = DEFAULT_D_MAX, eval_on: str = "all") -> ExperimentResult:
    """Evaluate every net on lidar-like band patterns with each layer count."""
    conditions = [(f"layers={n}", lambda s, n=n: LidarBands(n, s)) for n in layers]
    return _run(nets, conditions, pool, seed, d_max, eval_on)
