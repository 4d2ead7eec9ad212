"""Synthetic multi-agent scenes, their NDJSON file format and dataset splits."""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import J, rot_matrix

BEHAVIOURS = ("constant_velocity", "turn", "lane_change", "stop")


@dataclass
class Scene:
    id: str
    dt: float
    xy: np.ndarray                   # (agents, steps, 2)
    env: np.ndarray                  # (points, 2)
    agent_ids: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(len(self.xy), -1, 2)
        self.env = np.asarray(self.env, dtype=float).reshape(-1, 2)
        if not self.agent_ids:
            self.agent_ids = [str(i) for i in range(self.n_agents)]
        if len(self.agent_ids) != self.n_agents:
            raise ValueError("one id per agent required")
        if self.tags and len(self.tags) != self.n_agents:
            raise ValueError("one behaviour tag per agent required")
        if not (np.all(np.isfinite(self.xy)) and np.all(np.isfinite(self.env))):
            raise ValueError(f"scene {self.id}: positions must be finite")
        if not self.dt > 0:
            raise ValueError(f"scene {self.id}: dt must be positive")

    @property
    def n_agents(self) -> int:
        return self.xy.shape[0]

    @property
    def n_steps(self) -> int:
        return self.xy.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.id == other.id and self.dt == other.dt and self.agent_ids == other.agent_ids
                and self.tags == other.tags and np.array_equal(self.xy, other.xy)
                and np.array_equal(self.env, other.env))


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_scenes: int = 100
    n_agents: int = 3
    n_env: int = 3
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)   # order of BEHAVIOURS
    sigma: float = 0.02
    history: int = 6
    horizon: int = 9
    dt: float = 0.2
    speed_range: tuple[float, float] = (1.0, 3.0)
    turn_rate_range: tuple[float, float] = (0.3, 0.8)    # |omega|, rad/s; sign random
    heading_range: tuple[float, float] = (0.0, 2 * math.pi)
    spread: float = 4.0                                  # agents start in a disk of this radius
    env_radius: float = 6.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(BEHAVIOURS),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("behaviour weights must be four nonnegative numbers with positive sum")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n_scenes < 0 or self.n_agents < 1 or self.n_env < 0:
            raise ValueError("invalid scene, agent or environment count")
        if self.history < 2 or self.horizon < 0 or not self.dt > 0:
            raise ValueError("invalid history, horizon or dt")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError("invalid speed range")

    @property
    def n_steps(self) -> int:
        return self.history + self.horizon


# ---------------------------------------------------------------- noiseless behaviours
# Each returns positions at times tau for an agent starting at x0 with velocity v0.

def path_constant_velocity(x0, v0, tau):
    return x0 + tau[:, None] * v0


def path_turn(x0, v0, tau, omega: float):
    """Circular arc of radius |v0| / |omega| traversed at constant speed."""
    if omega == 0:
        return path_constant_velocity(x0, v0, tau)
    # x(tau) = x0 + (R(omega tau) - I) J^{-1} v0 / omega, with J^{-1} = -J
    r = rot_matrix(omega * tau) - np.eye(2)
    return x0 + r @ (-J @ v0) / omega


def path_lane_change(x0, v0, tau, offset: float, t_mid: float, duration: float):
    speed = np.linalg.norm(v0)
    normal = J @ v0 / speed if speed > 0 else np.zeros(2)
    s = 1.0 / (1.0 + np.exp(-(tau - t_mid) * 8.0 / duration))
    return x0 + tau[:, None] * v0 + offset * s[:, None] * normal


def path_stop(x0, v0, tau, t_stop: float):
    """Linear deceleration from v0 to rest at t_stop, then stationary."""
    tt = np.minimum(tau, t_stop)
    return x0 + (tt - tt * tt / (2.0 * t_stop))[:, None] * v0


def _agent_path(behaviour: str, x0, v0, tau, rng: np.random.Generator, cfg: GenConfig):
    span = tau[-1] if tau.size else 0.0
    if behaviour == "constant_velocity":
        return path_constant_velocity(x0, v0, tau)
    if behaviour == "turn":
        omega = rng.uniform(*cfg.turn_rate_range) * rng.choice([-1.0, 1.0])
        return path_turn(x0, v0, tau, omega)
    if behaviour == "lane_change":
        offset = rng.uniform(1.5, 3.5) * rng.choice([-1.0, 1.0])
        t_mid = rng.uniform(0.3, 0.8) * span
        return path_lane_change(x0, v0, tau, offset, t_mid, max(span / 2, 1e-9))
    if behaviour == "stop":
        t_stop = rng.uniform(0.4, 1.0) * max(span, 1e-9)
        return path_stop(x0, v0, tau, t_stop)
    raise ValueError(f"unknown behaviour '{behaviour}'")


def _uniform_disk(rng, radius, n):
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * math.pi, size=n)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)


def generate_scene(cfg: GenConfig, index: int) -> Scene:
    """Scene ``index`` of the stream defined by ``cfg``; independent of other indices.

    Process noise is a Gaussian random walk: every step adds an independent
    ``N(0, sigma^2 I)`` increment to the accumulated displacement.
    """
    rng = np.random.default_rng([cfg.seed, index])
    tau = np.arange(cfg.n_steps) * cfg.dt
    probs = np.asarray(cfg.weights, dtype=float) / np.sum(cfg.weights)
    starts = _uniform_disk(rng, cfg.spread, cfg.n_agents)
    xy, tags = [], []
    for a in range(cfg.n_agents):
        behaviour = BEHAVIOURS[rng.choice(len(BEHAVIOURS), p=probs)]
        heading = rng.uniform(*cfg.heading_range)
        speed = rng.uniform(*cfg.speed_range)
        v0 = speed * np.array([math.cos(heading), math.sin(heading)])
        path = _agent_path(behaviour, starts[a], v0, tau, rng, cfg)
        noise = np.cumsum(rng.normal(0.0, cfg.sigma, path.shape), axis=0) if cfg.sigma > 0 else 0.0
        xy.append(path + noise)
        tags.append(behaviour)
    env = _uniform_disk(rng, cfg.env_radius, cfg.n_env)
    return Scene(f"{cfg.seed}-{index}", cfg.dt, np.stack(xy), env, tags=tags)


def generate(cfg: GenConfig) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate positions and environment about the origin."""
    r = rot_matrix(angle)
    return Scene(scene.id, scene.dt, scene.xy @ r.T, scene.env @ r.T,
                 list(scene.agent_ids), list(scene.tags))


# ---------------------------------------------------------------- batching

@dataclass
class SceneBatch:
    history: np.ndarray   # (S, A, t, 2)
    future: np.ndarray    # (S, A, k, 2)
    env: np.ndarray       # (S, E, 2)
    tags: list[list[str]]

    def __len__(self) -> int:
        return self.history.shape[0]

    def subset(self, idx) -> "SceneBatch":
        idx = np.asarray(idx)
        return SceneBatch(self.history[idx], self.future[idx], self.env[idx],
                          [self.tags[i] for i in np.arange(len(self))[idx]])


def to_batch(scenes: Sequence[Scene], history: int, horizon: int) -> SceneBatch:
    """Stack scenes with equal agent and environment counts into arrays."""
    if not scenes:
        raise ValueError("no scenes to batch")
    need = history + horizon
    shapes = {(s.n_agents, s.env.shape[0]) for s in scenes}
    if len(shapes) != 1:
        raise ValueError("scenes in a batch must share agent and environment counts")
    for s in scenes:
        if s.n_steps < need:
            raise ValueError(f"scene {s.id} has {s.n_steps} steps, need {need} "
                             f"(history {history} + horizon {horizon})")
    xy = np.stack([s.xy[:, :need] for s in scenes])
    return SceneBatch(xy[:, :, :history], xy[:, :, history:], np.stack([s.env for s in scenes]),
                      [list(s.tags) for s in scenes])


# ---------------------------------------------------------------- NDJSON I/O

class SceneFormatError(ValueError):
    pass


def scene_to_dict(scene: Scene) -> dict:
    return {
        "id": scene.id,
        "dt": scene.dt,
        "agents": [{"id": aid, "xy": xy.tolist()} for aid, xy in zip(scene.agent_ids, scene.xy)],
        "env": scene.env.tolist(),
        "tags": list(scene.tags),
    }


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise SceneFormatError(f"{where}: missing field '{key}'")
    if not isinstance(doc[key], kind):
        raise SceneFormatError(f"{where}: field '{key}' has the wrong type")
    return doc[key]


def scene_from_dict(doc, where: str = "scene") -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{where}: expected a JSON object")
    sid = _require(doc, "id", (str, int), where)
    dt = _require(doc, "dt", (int, float), where)
    agents = _require(doc, "agents", list, where)
    env = _require(doc, "env", list, where)
    tags = doc.get("tags", [])
    if not isinstance(tags, list):
        raise SceneFormatError(f"{where}: field 'tags' has the wrong type")
    ids, xy = [], []
    for i, agent in enumerate(agents):
        if not isinstance(agent, dict):
            raise SceneFormatError(f"{where}: field 'agents[{i}]' is not an object")
        ids.append(str(_require(agent, "id", (str, int), f"{where} agents[{i}]")))
        xy.append(_require(agent, "xy", list, f"{where} agents[{i}]"))
    try:
        xy_arr = np.array(xy, dtype=float)
        env_arr = np.array(env, dtype=float).reshape(-1, 2)
    except (ValueError, TypeError) as exc:
        raise SceneFormatError(f"{where}: field 'agents.xy' or 'env' is not a numeric array ({exc})") from None
    if agents and (xy_arr.ndim != 3 or xy_arr.shape[-1] != 2):
        raise SceneFormatError(f"{where}: field 'agents.xy' must hold equal-length lists of [x, y]")
    if not agents:
        xy_arr = np.zeros((0, 0, 2))
    try:
        return Scene(str(sid), float(dt), xy_arr, env_arr, ids, [str(t) for t in tags])
    except ValueError as exc:
        raise SceneFormatError(f"{where}: {exc}") from None


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save(scenes: Iterable[Scene], path) -> int:
    """Write one JSON object per line; ``.gz`` paths are gzip-compressed."""
    n = 0
    with _open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def load(path) -> list[Scene]:
    out = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            out.append(scene_from_dict(doc, f"{path}:{lineno}"))
    return out


def split(scenes: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous train / calibration / test slices.

    Train and calibration sizes round down; the test slice rounds up but
    never exceeds what is left.
    """
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or f.sum() > 1 + 1e-12:
        raise ValueError("fractions must be three nonnegative numbers summing to at most 1")
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(f[0] * n + 1e-9))
    n_cal = int(math.floor(f[1] * n + 1e-9))
    n_test = min(int(math.ceil(f[2] * n - 1e-9)), n - n_train - n_cal)
    pick = [scenes[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_cal], pick[n_train + n_cal:n_train + n_cal + n_test]
