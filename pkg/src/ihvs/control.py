"""Proportional control in latent space and sequential box packing."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from . import sim
from .distributions import sample
from .imaging import CropWindow, crop_resize
from .model import IHVSModel, encode, goal_from_inhand
from .sim import Camera, SimConfig, WorldState


@dataclass(frozen=True)
class ControllerConfig:
    gain: float = 1.0  # 1/s
    u_max: float = 0.01  # m/s
    stop_eps: float = 2e-4
    max_steps: int = 20

    def __post_init__(self):
        if self.gain <= 0 or self.stop_eps <= 0 or self.max_steps < 1 or self.u_max <= 0:
            raise ValueError("need gain > 0, stop_eps > 0, u_max > 0 and max_steps >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def crop_observation(raw: np.ndarray, window: CropWindow, out_size=(64, 64)) -> np.ndarray:
    """Crop ``raw`` to ``window`` and resize bilinearly (half-pixel centres)."""
    return crop_resize(raw, window, out_size)


def p_control(x_t, x_g, cfg: ControllerConfig) -> np.ndarray:
    x_t, x_g = np.asarray(x_t, dtype=np.float64), np.asarray(x_g, dtype=np.float64)
    if x_t.shape != x_g.shape:
        raise ValueError("x_t and x_g must have equal shape")
    return np.clip(cfg.gain * (x_g - x_t), -cfg.u_max, cfg.u_max)


def observe(state: WorldState, camera: Camera = Camera.HAND) -> np.ndarray:
    cam = state.config.camera(camera)
    return crop_observation(sim.capture(state, camera), cam.crop_window, cam.output_size)


def latent_of(model: IHVSModel, state: WorldState, rng: Optional[torch.Generator] = None) -> np.ndarray:
    q = encode(model, observe(state), "hand")
    x = q.mean if rng is None else sample(q, rng)
    return x.double().numpy()


def goal_latent(model: IHVSModel, state: WorldState, rng: Optional[torch.Generator] = None) -> np.ndarray:
    _, p_g = goal_from_inhand(model, observe(state, Camera.INHAND), rng)
    x_g = p_g.mean if rng is None else sample(p_g, rng)
    return x_g.double().numpy()


@dataclass
class PositioningResult:
    state: WorldState
    x_g: np.ndarray
    trajectory: List[Tuple[Tuple[float, float], Tuple[float, float]]]  # (tcp, latent) per observation
    latent_errors: List[float]
    commands: List[Tuple[float, float]]
    steps_used: int
    stopped: bool  # True when the stop threshold ended the loop


Controller = Callable[[np.ndarray, np.ndarray, ControllerConfig], np.ndarray]


def run_positioning(state: WorldState, model: IHVSModel, cfg: ControllerConfig = ControllerConfig(),
                    rng: Optional[torch.Generator] = None, controller: Controller = p_control,
                    x_g: Optional[np.ndarray] = None) -> PositioningResult:
    """Servo the TCP onto the goal predicted from one in-hand observation.

    Posterior means are used unless ``rng`` is given. Each iteration observes,
    encodes and computes a command; the loop ends without executing that
    command once the latent error drops below ``stop_eps``, or after
    ``max_steps`` executed commands.
    """
    if state.held is None:
        raise sim.StateError("run_positioning needs a held object")
    if x_g is None:
        x_g = goal_latent(model, state, rng)
    traj, errs, cmds = [], [], []
    stopped = False
    executed = 0
    while True:
        x_t = latent_of(model, state, rng)
        err = float(np.linalg.norm(x_g - x_t))
        u = controller(x_t, x_g, cfg)
        traj.append((state.tcp, (float(x_t[0]), float(x_t[1]))))
        errs.append(err)
        cmds.append((float(u[0]), float(u[1])))
        if err < cfg.stop_eps:
            stopped = True
            break
        if executed >= cfg.max_steps:
            break
        state = sim.step(state, (float(u[0]), float(u[1])))
        executed += 1
    return PositioningResult(state, x_g, traj, errs, cmds, executed, stopped)


@dataclass
class StageRecord:
    stage: int
    success: bool
    final_tcp_error: float
    steps_used: int
    delta: float
    landing: Tuple[float, float]
    collision: bool
    trajectory: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trajectory"] = [{"tcp": list(p), "latent": list(x)} for p, x in self.trajectory]
        d["landing"] = list(self.landing)
        return d


@dataclass
class PackReport:
    stages: List[StageRecord]
    seed: Optional[int] = None

    @property
    def success(self) -> bool:
        return all(s.success for s in self.stages)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "overall_success": self.success,
                "stages": [s.to_dict() for s in self.stages]}


def pack_trial_rng(seed: int, index: int) -> np.random.Generator:
    """Stream for packing trial ``index``; disjoint from the collection streams, so
    evaluation offsets never repeat the training episodes' offsets."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, 1]))


def pack_sequence(config: SimConfig, model: IHVSModel, cfg: ControllerConfig, N: int,
                  rng: np.random.Generator, controller: Controller = p_control,
                  seed: Optional[int] = None) -> PackReport:
    """Place ``N`` objects one after another with the same model.

    The box starts with one object in slot 0. Each stage picks with a fresh
    vacuum offset, moves to the start pose p_0, servoes and places; p_0 for
    the next stage is the placing pose shifted one slot pitch along +x.
    Failed placements are recorded and the loop continues.
    """
    if N < 0 or N > config.n_slots - 1:
        raise ValueError(f"N must be in [0, {config.n_slots - 1}]")
    world = sim.new_world(config, 1)
    p0 = world.tcp
    records = []
    for n in range(1, N + 1):
        delta = float(rng.uniform(-config.delta_range, config.delta_range))
        world = sim.move_to(sim.pick(world, delta), p0)
        goal = sim.ground_truth_goal(world) if world.stage < config.n_slots else world.tcp
        res = run_positioning(world, model, cfg, controller=controller)
        world = res.state
        err = float(np.hypot(world.tcp[0] - goal[0], world.tcp[1] - goal[1]))
        p_T = world.tcp
        world, placed = sim.place(world)
        records.append(StageRecord(n, placed.success, err, res.steps_used, delta, placed.landing,
                                   placed.collision, res.trajectory))
        p0 = (p_T[0] + config.slot_pitch, p_T[1])
    return PackReport(records, seed)


def reports_to_json(reports: List[PackReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)


def reports_to_csv(reports: List[PackReport]) -> str:
    lines = ["trial,stage,success,final_tcp_error,steps_used,delta,landing_x,landing_y,collision"]
    for i, r in enumerate(reports):
        for s in r.stages:
            err, delta, lx, ly = (repr(float(v)) for v in (s.final_tcp_error, s.delta, *s.landing))
            lines.append(f"{i},{s.stage},{int(s.success)},{err},{s.steps_used},"
                         f"{delta},{lx},{ly},{int(s.collision)}")
    return "\n".join(lines) + "\n"
