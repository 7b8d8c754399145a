"""Latent-map alignment, positioning accuracy and sequential success rates."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import sim
from .control import ControllerConfig, PackReport, goal_latent, latent_of, run_positioning
from .model import IHVSModel
from .sim import SimConfig

WALK_HALF = 0.02  # half-extent (m) of the square the data-collection walk mostly covers


@dataclass(frozen=True)
class LatentRow:
    tcp_true: Tuple[float, float]
    latent_mean: Tuple[float, float]
    goal_flag: bool = False


@dataclass
class LatentMapTable:
    rows: List[LatentRow]

    @property
    def walk_rows(self) -> List[LatentRow]:
        return [r for r in self.rows if not r.goal_flag]

    @property
    def goal_rows(self) -> List[LatentRow]:
        return [r for r in self.rows if r.goal_flag]

    def to_csv(self) -> str:
        lines = ["tcp_x,tcp_y,lat_1,lat_2,goal_flag"]
        for r in self.rows:
            vals = (*r.tcp_true, *r.latent_mean)
            lines.append(",".join(repr(float(v)) for v in vals) + f",{int(r.goal_flag)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_arrays(cls, tcp, latent) -> "LatentMapTable":
        return cls([LatentRow(tuple(map(float, p)), tuple(map(float, x))) for p, x in zip(tcp, latent)])


def grid_points(center, half: float, n: int) -> List[Tuple[float, float]]:
    if n == 1:
        return [tuple(center)]
    offs = np.linspace(-half, half, n)
    return [(center[0] + dx, center[1] + dy) for dy in offs for dx in offs]


def latent_map(model: IHVSModel, config: SimConfig, n_grid: int = 15, half: float = WALK_HALF,
               stage: int = 1) -> LatentMapTable:
    """Encode hand images over a grid around the stage's centred goal, plus the
    goal latent predicted from the zero-offset in-hand image."""
    world = sim.pick(sim.new_world(config, stage), 0.0)
    center = config.slot_center(stage)
    rows = []
    for p in grid_points(center, half, n_grid):
        x = latent_of(model, sim.move_to(world, p))
        rows.append(LatentRow(p, (float(x[0]), float(x[1]))))
    x_g = goal_latent(model, world)
    rows.append(LatentRow(sim.ground_truth_goal(world), (float(x_g[0]), float(x_g[1])), True))
    return LatentMapTable(rows)


class DegenerateFitError(ValueError):
    pass


@dataclass
class AffineFit:
    r2: Tuple[float, float]  # per world axis
    matrix: np.ndarray  # 2x2, latent -> metres
    offset: np.ndarray

    def apply(self, latent) -> np.ndarray:
        return np.asarray(latent) @ self.matrix.T + self.offset


def affine_fit_r2(table: LatentMapTable) -> AffineFit:
    """Least-squares affine map latent -> TCP (walk rows only) and R^2 per world axis."""
    rows = table.walk_rows
    if len(rows) < 4:
        raise DegenerateFitError("need at least 4 rows")
    lat = np.array([r.latent_mean for r in rows], dtype=np.float64)
    tcp = np.array([r.tcp_true for r in rows], dtype=np.float64)
    design = np.hstack([lat, np.ones((len(rows), 1))])
    coef, _, rank, sv = np.linalg.lstsq(design, tcp, rcond=None)
    if rank < 3 or sv[-1] <= 1e-12 * sv[0]:
        raise DegenerateFitError("latent rows are collinear")
    pred = design @ coef
    ss_res = ((tcp - pred) ** 2).sum(0)
    ss_tot = ((tcp - tcp.mean(0)) ** 2).sum(0)
    r2 = tuple(float(1 - a / b) if b > 0 else float("nan") for a, b in zip(ss_res, ss_tot))
    return AffineFit(r2, coef[:2].T.copy(), coef[2].copy())


def in_convex_hull(point, points) -> bool:
    from scipy.spatial import Delaunay

    return bool(Delaunay(np.asarray(points)).find_simplex(np.asarray(point)[None])[0] >= 0)


@dataclass
class TrialStats:
    n_trials: int
    mean_error: float
    std_error: float
    errors: List[float]

    @classmethod
    def from_errors(cls, errors: Sequence[float]) -> "TrialStats":
        e = np.asarray(errors, dtype=np.float64)
        return cls(len(e), float(e.mean()), float(e.std()), [float(x) for x in e])

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)


def positioning_trials(model: IHVSModel, config: SimConfig, cfg: ControllerConfig, n_trials: int,
                       seed: int, half: float = WALK_HALF, start_at_goal: bool = False) -> TrialStats:
    """Pick with a random offset, start at a random pose in the walk square, servo,
    and measure the Euclidean TCP error to the ground-truth placing pose."""
    rng = np.random.default_rng(seed)
    center = config.slot_center(1)
    errors = []
    for _ in range(n_trials):
        delta = float(rng.uniform(-config.delta_range, config.delta_range))
        world = sim.pick(sim.new_world(config, 1), delta)
        goal = sim.ground_truth_goal(world)
        off = rng.uniform(-half, half, size=2)
        start = goal if start_at_goal else (center[0] + off[0], center[1] + off[1])
        res = run_positioning(sim.move_to(world, start), model, cfg)
        errors.append(math.hypot(res.state.tcp[0] - goal[0], res.state.tcp[1] - goal[1]))
    return TrialStats.from_errors(errors)


def success_curve(reports: Sequence[PackReport], conditional: bool = False) -> List[float]:
    """Per-stage success rate.

    Cumulative (default): fraction of trials whose stages 1..n all succeeded.
    Conditional: success rate at stage n among trials that reached it cleanly.
    """
    lengths = {len(r.stages) for r in reports}
    if len(lengths) > 1:
        raise ValueError(f"reports have mixed stage counts {sorted(lengths)}")
    if not reports:
        return []
    N = lengths.pop()
    ok = np.array([[s.success for s in r.stages] for r in reports], dtype=bool).reshape(len(reports), N)
    cum = np.cumprod(ok, axis=1).astype(bool)
    if not conditional:
        return [float(v) for v in cum.mean(0)]
    rates = []
    for n in range(N):
        reached = cum[:, n - 1] if n else np.ones(len(reports), bool)
        rates.append(float(ok[reached, n].mean()) if reached.any() else float("nan"))
    return rates


def success_curve_csv(rates: Sequence[float]) -> str:
    return "stage,rate\n" + "".join(f"{i + 1},{float(r)!r}\n" for i, r in enumerate(rates))
