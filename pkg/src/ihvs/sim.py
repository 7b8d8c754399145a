"""Deterministic top-down 2D packing world.

The world frame has its origin at the low-x, low-y corner of the box interior.
Slots fill along +x. The held object's longitudinal axis is world x, and the
vacuum offset ``delta`` displaces the object centre from the TCP along it.

Everything here is pure: states are frozen and every operation returns a new
one. Ground-truth helpers exist for evaluation only.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Tuple

import numpy as np

from .imaging import CropWindow, crop_resize

SIM_VERSION = "ihvs-sim/1"

Vec2 = Tuple[float, float]
RGB = Tuple[float, float, float]


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Camera(enum.Enum):
    HAND = "hand"
    INHAND = "inhand"


@dataclass(frozen=True)
class CameraSpec:
    offset_from_tcp: Vec2
    footprint: Vec2  # metres imaged, (x extent, y extent)
    resolution: Tuple[int, int]  # capture raster (width, height)
    crop_window: CropWindow
    output_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        x0, y0, w, h = self.crop_window
        rw, rh = self.resolution
        if min(x0, y0) < 0 or w <= 0 or h <= 0 or x0 + w > rw or y0 + h > rh:
            raise ConfigError(f"crop_window {self.crop_window} not inside resolution {self.resolution}")
        if min(self.output_size) <= 0:
            raise ConfigError("output_size components must be positive")
        if min(self.footprint) <= 0:
            raise ConfigError("footprint must be positive")

    @property
    def pixel_size(self) -> Vec2:
        return (self.footprint[0] / self.resolution[0], self.footprint[1] / self.resolution[1])

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CameraSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown camera key: {unknown[0]!r}")
        missing = sorted(names - set(d) - {"output_size"})
        if missing:
            raise ConfigError(f"camera spec missing key: {missing[0]!r}")
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class SimConfig:
    """World geometry, timing and cameras. Defaults are the "wide" preset."""

    box_inner_w: float = 0.55
    box_inner_h: float = 0.058
    object_w: float = 0.10
    object_h: float = 0.05
    slot_pitch: float = 0.108
    n_slots: int = 5
    clearance: float = 0.0035
    dt: float = 0.5
    u_max: float = 0.01
    delta_range: float = 0.01
    wall_thickness: float = 0.02
    workspace_margin: float = 0.05
    hand_cam: CameraSpec = CameraSpec(
        offset_from_tcp=(-0.058, 0.0), footprint=(0.16, 0.064),
        resolution=(300, 120), crop_window=(86, 0, 128, 120))
    inhand_cam: CameraSpec = CameraSpec(
        offset_from_tcp=(0.05, 0.0), footprint=(0.12, 0.10),
        resolution=(360, 300), crop_window=(116, 86, 128, 128))
    background_color: RGB = (0.86, 0.84, 0.78)
    object_color: RGB = (0.18, 0.36, 0.74)
    box_color: RGB = (0.52, 0.36, 0.22)

    def __post_init__(self):
        eps = 1e-12
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.n_slots * self.slot_pitch > self.box_inner_w + eps:
            raise ConfigError("n_slots * slot_pitch exceeds box_inner_w")
        if self.slot_pitch < self.object_w:
            raise ConfigError("slot_pitch must be >= object_w")
        if not 0 < self.clearance < (self.slot_pitch - self.object_w) / 2:
            raise ConfigError("clearance must lie in (0, (slot_pitch - object_w) / 2)")
        if self.box_inner_h < self.object_h:
            raise ConfigError("box_inner_h must be >= object_h")
        if self.dt <= 0 or self.u_max <= 0 or self.delta_range < 0:
            raise ConfigError("need dt > 0, u_max > 0, delta_range >= 0")

    @property
    def wall_margin(self) -> float:
        return (self.box_inner_w - self.n_slots * self.slot_pitch) / 2

    def slot_center(self, k: int) -> Vec2:
        return (self.wall_margin + (k + 0.5) * self.slot_pitch, self.box_inner_h / 2)

    @property
    def workspace(self) -> Tuple[float, float, float, float]:
        m = self.workspace_margin
        return (-m, -m, self.box_inner_w + m, self.box_inner_h + m)

    def camera(self, cam: Camera) -> CameraSpec:
        return self.hand_cam if cam is Camera.HAND else self.inhand_cam

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: "SimConfig | None" = None) -> "SimConfig":
        """Build a config from a (possibly partial) mapping; unknown keys are rejected."""
        base = base or cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in names:
                raise ConfigError(f"unknown sim config key: {key!r}")
            if key in ("hand_cam", "inhand_cam"):
                merged = dataclasses.asdict(getattr(base, key))
                merged.update(value)
                value = CameraSpec.from_dict(merged)
            elif key.endswith("_color"):
                value = tuple(float(c) for c in value)
            elif key == "n_slots":
                value = int(value)
            else:
                value = float(value)
            kwargs[key] = value
        return dataclasses.replace(base, **kwargs)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _tight_preset() -> SimConfig:
    # Cable-package analogue: 210 x 80 mm footprint, 3 mm slot play
    w, h, pitch = 0.21, 0.08, 0.213
    return SimConfig(
        box_inner_w=5 * pitch + 0.01, box_inner_h=h + (pitch - w), object_w=w, object_h=h,
        slot_pitch=pitch, clearance=0.0014,
        hand_cam=CameraSpec(offset_from_tcp=(-(pitch - w / 2), 0.04), footprint=(0.16, 0.064),
                            resolution=(300, 120), crop_window=(86, 0, 128, 120)),
        inhand_cam=CameraSpec(offset_from_tcp=(w / 2, 0.0), footprint=(0.12, 0.10),
                              resolution=(360, 300), crop_window=(116, 86, 128, 128)),
    )


PRESETS = {"wide": SimConfig(), "tight": _tight_preset()}


def preset(name: str) -> SimConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class Held:
    delta: float


@dataclass(frozen=True)
class WorldState:
    tcp: Vec2
    config: SimConfig
    held: Optional[Held] = None
    placed: Tuple[Vec2, ...] = ()
    failed: Tuple[Vec2, ...] = ()  # objects left where a placement failed
    clamped: bool = field(default=False, compare=False)

    @property
    def stage(self) -> int:
        return len(self.placed)


@dataclass(frozen=True)
class PlaceResult:
    success: bool
    landing: Vec2
    error: Vec2  # landing minus target slot centre
    in_tolerance: bool
    collision: bool


def new_world(config: SimConfig, initial_stage: int) -> WorldState:
    if not 1 <= initial_stage <= config.n_slots:
        raise ConfigError(f"initial_stage must be in [1, {config.n_slots}], got {initial_stage}")
    placed = tuple(config.slot_center(k) for k in range(initial_stage))
    if initial_stage < config.n_slots:
        tcp = config.slot_center(initial_stage)
    else:
        x, y = config.slot_center(initial_stage - 1)
        tcp = (x + config.slot_pitch, y)
    return WorldState(tcp=_clamp_to_workspace(config, tcp)[0], config=config, placed=placed)


def _clamp_to_workspace(config: SimConfig, p: Vec2) -> Tuple[Vec2, bool]:
    x0, y0, x1, y1 = config.workspace
    x = min(max(p[0], x0), x1)
    y = min(max(p[1], y0), y1)
    return (x, y), (x != p[0] or y != p[1])


def step(state: WorldState, u: Vec2, dt: float | None = None) -> WorldState:
    """Euler-integrate a Cartesian velocity command; clamps silently at the workspace edge."""
    dt = state.config.dt if dt is None else dt
    target = (state.tcp[0] + u[0] * dt, state.tcp[1] + u[1] * dt)
    tcp, clamped = _clamp_to_workspace(state.config, target)
    return dataclasses.replace(state, tcp=tcp, clamped=clamped)


def move_to(state: WorldState, tcp: Vec2) -> WorldState:
    pos, clamped = _clamp_to_workspace(state.config, (float(tcp[0]), float(tcp[1])))
    return dataclasses.replace(state, tcp=pos, clamped=clamped)


def pick(state: WorldState, delta: float) -> WorldState:
    if state.held is not None:
        raise StateError("already holding an object")
    if abs(delta) > state.config.delta_range + 1e-15:
        raise StateError(f"|delta|={abs(delta)} exceeds delta_range={state.config.delta_range}")
    return dataclasses.replace(state, held=Held(float(delta)))


def held_center(state: WorldState) -> Vec2:
    if state.held is None:
        raise StateError("nothing held")
    return (state.tcp[0] + state.held.delta, state.tcp[1])


def _rect(c: Vec2, w: float, h: float):
    return (c[0] - w / 2, c[1] - h / 2, c[0] + w / 2, c[1] + h / 2)


def rects_overlap(a, b) -> bool:
    """Positive-area intersection of two (x0, y0, x1, y1) rectangles."""
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def place(state: WorldState) -> Tuple[WorldState, PlaceResult]:
    cfg = state.config
    landing = held_center(state)
    if state.stage >= cfg.n_slots:
        raise StateError("box is full")
    target = cfg.slot_center(state.stage)
    err = (landing[0] - target[0], landing[1] - target[1])
    in_tol = abs(err[0]) <= cfg.clearance and abs(err[1]) <= cfg.clearance
    r = _rect(landing, cfg.object_w, cfg.object_h)
    inside = r[0] >= 0 and r[1] >= 0 and r[2] <= cfg.box_inner_w and r[3] <= cfg.box_inner_h
    others = state.placed + state.failed
    collision = (not inside) or any(
        rects_overlap(r, _rect(p, cfg.object_w, cfg.object_h)) for p in others)
    success = in_tol and not collision
    if success:
        new = dataclasses.replace(state, held=None, placed=state.placed + (landing,))
    else:
        new = dataclasses.replace(state, held=None, failed=state.failed + (landing,))
    return new, PlaceResult(success, landing, err, in_tol, collision)


def ground_truth_goal(state: WorldState) -> Vec2:
    """TCP pose at which ``place`` lands the held object exactly on the next slot centre."""
    cfg = state.config
    if state.held is None:
        raise StateError("nothing held")
    if state.stage >= cfg.n_slots:
        raise StateError("box is full")
    x, y = cfg.slot_center(state.stage)
    return (x - state.held.delta, y)


# -- rendering ---------------------------------------------------------------

def _coverage(edges: np.ndarray, lo: float, hi: float, size: float) -> np.ndarray:
    a = np.maximum(edges[:-1], lo)
    b = np.minimum(edges[1:], hi)
    return np.clip(b - a, 0.0, None) / size


def _raster(cam: CameraSpec, center: Vec2, background: RGB, rects) -> np.ndarray:
    """Coverage-weighted painter's rasteriser for axis-aligned rectangles.

    ``rects`` is a sequence of ((x0, y0, x1, y1), color) in the camera's frame.
    """
    W, H = cam.resolution
    px, py = cam.pixel_size
    left = center[0] - cam.footprint[0] / 2
    top = center[1] + cam.footprint[1] / 2
    xe = left + np.arange(W + 1, dtype=np.float64) * px
    ye = top - np.arange(H + 1, dtype=np.float64) * py  # descending: row 0 is the top
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:] = background
    for (x0, y0, x1, y1), color in rects:
        cx = _coverage(xe, x0, x1, px)
        cy = _coverage(ye[::-1], y0, y1, py)[::-1]
        if not cx.any() or not cy.any():
            continue
        alpha = np.outer(cy, cx)[:, :, None]
        img += alpha * (np.asarray(color) - img)
    return img


def capture(state: WorldState, camera: Camera) -> np.ndarray:
    """Full-resolution capture raster (before crop/resize), float64."""
    cfg = state.config
    cam = cfg.camera(camera)
    if camera is Camera.HAND:
        t = cfg.wall_thickness
        rects = [((-t, -t, cfg.box_inner_w + t, cfg.box_inner_h + t), cfg.box_color),
                 ((0.0, 0.0, cfg.box_inner_w, cfg.box_inner_h), cfg.background_color)]
        rects += [(_rect(p, cfg.object_w, cfg.object_h), cfg.object_color)
                  for p in state.placed + state.failed]
        center = (state.tcp[0] + cam.offset_from_tcp[0], state.tcp[1] + cam.offset_from_tcp[1])
    else:
        rects = []
        if state.held is not None:
            rects.append((_rect((state.held.delta, 0.0), cfg.object_w, cfg.object_h), cfg.object_color))
        center = cam.offset_from_tcp  # in the gripper frame
    return _raster(cam, center, cfg.background_color, rects)


def render(state: WorldState, camera: Camera) -> np.ndarray:
    """Observation image as the model sees it: capture, crop, resize (float32)."""
    cam = state.config.camera(camera)
    return crop_resize(capture(state, camera), cam.crop_window, cam.output_size)


def sim_version_hash() -> str:
    return hashlib.sha256(SIM_VERSION.encode()).hexdigest()[:16]
