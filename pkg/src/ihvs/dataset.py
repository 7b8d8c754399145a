"""Annotation-free random-walk data collection and the ``.ihvs`` dataset file.

File layout (all integers little-endian)::

    offset 0   4 bytes   magic b"IHVS"
    offset 4   u32       header length H in bytes
    offset 8   H bytes   UTF-8 JSON header (sorted keys)
    then, per episode, in order:
        u64 length + float32 blob   in-hand image I_z, shape (64, 64, 3)
        u64 length + float32 blob   goal image I_g, shape (64, 64, 3)
        u64 length + float32 blob   observations, shape (T, 64, 64, 3)
        u64 length + float64 blob   actions, shape (T, 2)

Arrays are row-major. The header carries ``magic``, ``version`` (1), the sim
config snapshot, ``sim_version`` (hash of the simulator version string),
``collection_params``, per-episode ``meta`` and a SHA-256 digest of every
episode's payload bytes.
"""
from __future__ import annotations

import concurrent.futures as cf
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import sim
from .sim import Camera, SimConfig

MAGIC = b"IHVS"
VERSION = 1
DEFAULT_T = 20


class DatasetFormatError(ValueError):
    """Raised for corrupt or incompatible dataset files; names the failing section."""


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Step:
    obs: np.ndarray  # I_t, float32 (64, 64, 3)
    action: Tuple[float, float]  # u_t in m/s, as commanded


@dataclass(frozen=True)
class EpisodeMeta:
    """Evaluation-only ground truth; never fed to the model."""

    delta_true: float
    pick_tcp: Tuple[float, float]
    stage: int
    seed: int
    index: int = 0


@dataclass(frozen=True)
class Episode:
    inhand_image: np.ndarray
    goal_image: np.ndarray
    steps: Tuple[Step, ...]
    meta: EpisodeMeta

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.meta == other.meta
                and np.array_equal(self.inhand_image, other.inhand_image)
                and np.array_equal(self.goal_image, other.goal_image)
                and len(self.steps) == len(other.steps)
                and all(a.action == b.action and np.array_equal(a.obs, b.obs)
                        for a, b in zip(self.steps, other.steps)))


@dataclass
class Dataset:
    episodes: List[Episode]
    config: SimConfig
    collection_params: dict = field(default_factory=dict)
    sim_version: str = field(default_factory=sim.sim_version_hash)

    @property
    def n_transitions(self) -> int:
        return sum(len(e.steps) for e in self.episodes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config == other.config and self.collection_params == other.collection_params
                and self.sim_version == other.sim_version and self.episodes == other.episodes)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Per-episode stream: PCG64 seeded from ``SeedSequence([seed, index])``."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def pick_pose_world(config: SimConfig, stage: int, delta: float) -> sim.WorldState:
    """World right after picking the object that sat in slot ``stage``, TCP at the pick pose."""
    w = sim.new_world(config, stage)
    w = sim.pick(w, delta)
    return sim.move_to(w, sim.ground_truth_goal(w))


def collect_episode(config: SimConfig, stage: int, rng: np.random.Generator, T: int = DEFAULT_T,
                    seed: int = 0, index: int = 0) -> Episode:
    if not 1 <= stage <= config.n_slots - 1:
        raise sim.ConfigError(f"stage must be in [1, {config.n_slots - 1}]")
    delta = float(rng.uniform(-config.delta_range, config.delta_range)) if config.delta_range > 0 else 0.0
    w = pick_pose_world(config, stage, delta)
    inhand = sim.render(w, Camera.INHAND)
    goal = sim.render(w, Camera.HAND)
    pick_tcp = w.tcp
    actions = rng.uniform(-config.u_max, config.u_max, size=(T, 2))
    steps = []
    obs = goal
    for t in range(T):
        u = (float(actions[t, 0]), float(actions[t, 1]))
        steps.append(Step(obs, u))
        if t < T - 1:
            w = sim.step(w, u)
            obs = sim.render(w, Camera.HAND)
    meta = EpisodeMeta(delta, pick_tcp, stage, seed, index)
    return Episode(inhand, goal, tuple(steps), meta)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("IHVS_THREADS", "1")))
    except ValueError:
        return 1


def collect_dataset(config: SimConfig, n_episodes: int, seed: int, T: int = DEFAULT_T,
                    stages: Optional[List[int]] = None) -> Dataset:
    """Collect ``n_episodes`` random-walk episodes.

    Episode ``i`` draws from ``episode_rng(seed, i)`` so the result does not
    depend on worker count. ``stages`` mixes collection stages (cycled per
    episode); the default collects at stage 1 only.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    stages = list(stages or [1])

    def one(i: int) -> Episode:
        return collect_episode(config, stages[i % len(stages)], episode_rng(seed, i), T, seed, i)

    workers = min(_threads(), n_episodes)
    if workers > 1:
        with cf.ThreadPoolExecutor(workers) as ex:
            episodes = list(ex.map(one, range(n_episodes)))
    else:
        episodes = [one(i) for i in range(n_episodes)]
    params = {"n_episodes": n_episodes, "T": T, "dt": config.dt, "seed": seed, "stages": stages}
    return Dataset(episodes, config, params)


def replay_mismatches(ds: Dataset) -> List[Tuple[int, int]]:
    """Re-simulate every episode; return (episode, step) pairs whose stored
    observation differs from the simulator (``step == -1`` for I_z, ``-2`` for I_g)."""
    bad = []
    for ei, ep in enumerate(ds.episodes):
        w = sim.pick(sim.new_world(ds.config, ep.meta.stage), ep.meta.delta_true)
        w = sim.move_to(w, ep.meta.pick_tcp)
        if not np.array_equal(sim.render(w, Camera.INHAND), ep.inhand_image):
            bad.append((ei, -1))
        if not np.array_equal(sim.render(w, Camera.HAND), ep.goal_image):
            bad.append((ei, -2))
        for t, s in enumerate(ep.steps):
            if not np.array_equal(sim.render(w, Camera.HAND), s.obs):
                bad.append((ei, t))
            w = sim.step(w, s.action)
    return bad


# -- serialisation ---------------------------------------------------------------------

def _blob(arr: np.ndarray, dtype: str) -> bytes:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
    return struct.pack("<Q", len(data)) + data


def _episode_payload(ep: Episode) -> bytes:
    obs = np.stack([s.obs for s in ep.steps])
    act = np.array([s.action for s in ep.steps], dtype=np.float64)
    return (_blob(ep.inhand_image, "f4") + _blob(ep.goal_image, "f4")
            + _blob(obs, "f4") + _blob(act, "f8"))


def dumps(ds: Dataset) -> bytes:
    payloads = [_episode_payload(e) for e in ds.episodes]
    first = ds.episodes[0] if ds.episodes else None
    header = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "config": ds.config.to_dict(),
        "sim_version": ds.sim_version,
        "collection_params": ds.collection_params,
        "image_shape": list(first.inhand_image.shape) if first else [64, 64, 3],
        "episodes": [
            {"T": len(e.steps), "delta_true": e.meta.delta_true, "pick_tcp": list(e.meta.pick_tcp),
             "stage": e.meta.stage, "seed": e.meta.seed, "index": e.meta.index,
             "sha256": hashlib.sha256(p).hexdigest(), "nbytes": len(p)}
            for e, p in zip(ds.episodes, payloads)],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(payloads)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps(ds))


def _read_blob(buf: io.BytesIO, dtype: str, shape, section: str) -> np.ndarray:
    raw = buf.read(8)
    if len(raw) != 8:
        raise DatasetFormatError(f"truncated file in {section}")
    (n,) = struct.unpack("<Q", raw)
    data = buf.read(n)
    dt = np.dtype(dtype).newbyteorder("<")
    if len(data) != n or n != int(np.prod(shape)) * dt.itemsize:
        raise DatasetFormatError(f"truncated or mis-sized blob in {section}")
    return np.frombuffer(data, dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def loads(data: bytes) -> Dataset:
    if len(data) < 8 or data[:4] != MAGIC:
        raise DatasetFormatError("bad magic in header")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise DatasetFormatError("truncated file in header")
    try:
        header = json.loads(data[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unparseable JSON in header: {exc}") from None
    if header.get("magic") != MAGIC.decode():
        raise DatasetFormatError("bad magic in header")
    if header.get("version") != VERSION:
        raise UnsupportedVersionError(
            f"unsupported dataset version {header.get('version')!r} in header (expected {VERSION})")
    config = SimConfig.from_dict(header["config"])
    shape = tuple(header["image_shape"])
    pos = 8 + hlen
    episodes = []
    for i, eh in enumerate(header["episodes"]):
        section = f"episode {i}"
        chunk = data[pos:pos + eh["nbytes"]]
        if len(chunk) != eh["nbytes"]:
            raise DatasetFormatError(f"truncated file in {section}")
        if hashlib.sha256(chunk).hexdigest() != eh["sha256"]:
            raise DatasetFormatError(f"checksum mismatch in {section}")
        pos += eh["nbytes"]
        buf = io.BytesIO(chunk)
        T = eh["T"]
        inhand = _read_blob(buf, "f4", shape, f"{section} inhand image")
        goal = _read_blob(buf, "f4", shape, f"{section} goal image")
        obs = _read_blob(buf, "f4", (T,) + shape, f"{section} observations")
        act = _read_blob(buf, "f8", (T, 2), f"{section} actions")
        steps = tuple(Step(obs[t], (float(act[t, 0]), float(act[t, 1]))) for t in range(T))
        meta = EpisodeMeta(eh["delta_true"], tuple(eh["pick_tcp"]), eh["stage"], eh["seed"], eh["index"])
        episodes.append(Episode(inhand, goal, steps, meta))
    if pos != len(data):
        raise DatasetFormatError("trailing bytes after last episode")
    return Dataset(episodes, config, header["collection_params"], header["sim_version"])


def read_dataset(path) -> Dataset:
    return loads(Path(path).read_bytes())
