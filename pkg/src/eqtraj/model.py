"""Equivariant probabilistic trajectory forecaster.

One step of the network maps, for every agent, the recent velocities and the
current position covariance to a Gaussian over the next velocity.  Velocity
uncertainty is integrated into position uncertainty with zero cross
covariance, and the step is applied autoregressively over the horizon.

All arrays are batched over scenes: agent histories are ``(S, A, t, 2)``,
environment points ``(S, E, 2)``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .eqconv import KernelParams, MatrixHeadParams, exp_head, conv, pair_geometry
from .gaussian import Gaussian2, log_density
from .geom import expm2
from .group import AngularGrid
from .metrics import regional_score

log = logging.getLogger(__name__)

FORMAT_NAME = "eqtraj-model"
FORMAT_VERSION = 1
VARIANTS = ("equivariant", "ablation")


@dataclass(frozen=True)
class ModelConfig:
    history: int = 6             # observed positions t; the network sees t - 1 velocities
    horizon: int = 9             # forecast steps k
    dt: float = 0.1
    n_theta: int = 16
    n_r: int = 4
    radius: float = 10.0
    widths: tuple[int, ...] = (8, 8)
    variant: str = "equivariant"
    eps: float = 1e-6            # initial position variance

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.history < 2:
            raise ValueError("history must contain at least two observed positions")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("need at least one layer of positive width")
        AngularGrid(self.n_theta)

    @property
    def in_channels(self) -> int:
        # t - 1 velocities, one covariance field, one environment indicator
        return self.history + 1

    @property
    def head_channels(self) -> int:
        return self.in_channels + self.widths[-1]

    @property
    def equivariant(self) -> bool:
        return self.variant == "equivariant"


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, scale: float = 1.0,
             zero_heads: bool = False) -> "ModelParams":
        rng = np.random.default_rng(seed)
        n, nr = config.n_theta, config.n_r
        w: dict[str, np.ndarray] = {}
        c_in = config.in_channels
        for l, c_out in enumerate(config.widths):
            s = scale / math.sqrt(c_in * n)
            if config.equivariant:
                w[f"layer{l}.offset"] = rng.normal(0, s, (nr, n, c_in, c_out))
                w[f"layer{l}.direction"] = rng.normal(0, 0.5 / n, (nr, n, c_in))
                w[f"layer{l}.bias"] = np.zeros(c_out)
            else:
                w[f"layer{l}.offset"] = rng.normal(0, s, (nr, n, n, c_in, c_out))
                w[f"layer{l}.direction"] = rng.normal(0, 0.5 / n, (nr, n, n, c_in))
                w[f"layer{l}.bias"] = np.zeros((c_out, n))
            w[f"layer{l}.mix"] = rng.normal(0, scale / math.sqrt(c_in), (c_in, c_out))
            c_in = c_out
        ch = config.head_channels
        w["env"] = np.array(rng.normal(0, scale))
        hs = 0.0 if zero_heads else 0.1 * scale / math.sqrt(ch)
        if config.equivariant:
            w["head.mu"] = rng.normal(0, hs, ch)
            w["head.cov"] = rng.normal(0, hs, ch)
            w["head.cov_bias"] = np.array(0.0)
            w["head.m"] = np.zeros((2, 2)) if zero_heads else np.eye(2) / n
        else:
            w["head.mu"] = rng.normal(0, hs / n, (ch, n, 2))
            w["head.cov"] = rng.normal(0, hs / n, (ch, n, 2, 2))
            w["head.cov_bias"] = np.zeros((2, 2))
        return cls(config, w)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.weights.values()])

    def with_flat(self, vec) -> "ModelParams":
        out, i = {}, 0
        for k, v in self.weights.items():
            out[k] = np.asarray(vec[i:i + v.size], dtype=float).reshape(v.shape)
            i += v.size
        return ModelParams(self.config, out)

    # ---------------------------------------------------------------- serialisation
    def to_json(self) -> str:
        cfg = asdict(self.config)
        cfg["widths"] = list(cfg["widths"])
        layers = [{"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                  for k, v in self.weights.items()]
        doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config": cfg,
               "dt": cfg["dt"], "t": cfg["history"], "k": cfg["horizon"],
               "n_theta": cfg["n_theta"], "n_r": cfg["n_r"], "R": cfg["radius"],
               "layers": layers}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_NAME:
            raise ValueError("not a serialised model document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {doc.get('version')}")
        cfg = dict(doc["config"])
        cfg["widths"] = tuple(cfg["widths"])
        config = ModelConfig(**cfg)
        weights = {}
        for layer in doc["layers"]:
            arr = np.array(layer["data"], dtype=float)
            weights[layer["name"]] = arr.reshape(layer["shape"])
        return cls(config, weights)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class ForecastDist:
    """Per-agent, per-step Gaussians over position (and the velocity Gaussians
    that produced them).  Shapes ``(S, A, k, 2)`` and ``(S, A, k, 2, 2)``."""

    means: np.ndarray
    covs: np.ndarray
    vel_means: np.ndarray | None = None
    vel_covs: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return ad.value(self.means).shape[-2]

    def detached(self) -> "ForecastDist":
        return ForecastDist(*(None if x is None else np.asarray(ad.value(x))
                              for x in (self.means, self.covs, self.vel_means, self.vel_covs)))

    def gaussian(self, scene: int, agent: int, step: int) -> Gaussian2:
        return Gaussian2(ad.value(self.means)[scene, agent, step], ad.value(self.covs)[scene, agent, step])


# ---------------------------------------------------------------- network

def _kernel(config: ModelConfig, w: Mapping, l: int) -> KernelParams:
    return KernelParams(w[f"layer{l}.offset"], w[f"layer{l}.direction"], w[f"layer{l}.mix"],
                        config.radius, equivariant=config.equivariant)


def input_features(config: ModelConfig, w: Mapping, velocities, cov_x, n_env: int):
    """Regular-field inputs for agents and environment nodes, ``(S, A+E, C, n)``."""
    grid = AngularGrid(config.n_theta)
    e = grid.directions
    vel_f = ad.einsum("...k,bk->...b", velocities, e)
    # e_b^T cov e_b is what the two lifted columns of any factor M (M M^T = cov)
    # sum to after squaring, so the field does not depend on how M is chosen
    q = ad.einsum("...xy,bx,by->...b", cov_x, e, e)
    s = ad.sqrt(q) * (1.0 / config.dt)
    # bounded, so a growing covariance cannot feed exp(F) without limit
    cov_f = s / (s + 1.0)
    lead = ad.value(velocities).shape[:-3]
    n_agents = ad.value(velocities).shape[-3]
    n = config.n_theta
    agent_f = ad.concat([vel_f, ad.reshape(cov_f, lead + (n_agents, 1, n)),
                         np.zeros(lead + (n_agents, 1, n))], axis=-2)
    env_f = ad.concat([np.zeros(lead + (n_env, config.in_channels - 1, n)),
                       w["env"] * np.ones(lead + (n_env, 1, n))], axis=-2)
    return ad.concat([agent_f, env_f], axis=-3)


def forward_step(params: ModelParams | Mapping, velocities, cov_x, positions, env,
                 config: ModelConfig | None = None):
    """One network evaluation.

    Parameters
    ----------
    velocities : (S, A, t-1, 2) past velocities, oldest first
    cov_x : (S, A, 2, 2) current position covariance
    positions : (S, A, 2) current position means
    env : (S, E, 2) environment points

    Returns
    -------
    mu_v : (S, A, 2) velocity mean
    m_v : (S, A, 2, 2) velocity covariance factor, ``Sigma_v = m_v m_v^T``
    """
    if isinstance(params, ModelParams):
        config, w = params.config, params.weights
    else:
        w = params
    if ad.value(velocities).shape[-2] != config.history - 1:
        raise ValueError(f"expected {config.history - 1} past velocities, "
                         f"got {ad.value(velocities).shape[-2]}")
    n_agents = ad.value(velocities).shape[-3]
    env = np.asarray(env, dtype=float)
    feats = input_features(config, w, velocities, cov_x, env.shape[-2])
    pos = ad.concat([positions, env], axis=-2)
    grid = AngularGrid(config.n_theta)
    geometry = pair_geometry(pos, config.radius, config.n_r, grid)
    h = feats
    for l in range(len(config.widths)):
        out = conv(pos, h, _kernel(config, w, l), geometry)
        bias = w[f"layer{l}.bias"]
        out = out + (bias[:, None] if config.equivariant else bias)
        h = ad.silu(out)
    h_agent = ad.concat([feats[..., :n_agents, :, :], h[..., :n_agents, :, :]], axis=-2)
    if config.equivariant:
        e = grid.directions * (2.0 / config.n_theta)
        mu_v = ad.einsum("...cb,c,bk->...k", h_agent, w["head.mu"], e)
        f = ad.einsum("...cb,c->...b", h_agent, w["head.cov"]) + w["head.cov_bias"]
        m_v = exp_head(f, MatrixHeadParams(w["head.m"]))
    else:
        mu_v = ad.einsum("...cb,cbk->...k", h_agent, w["head.mu"])
        logm = ad.einsum("...cb,cbxy->...xy", h_agent, w["head.cov"]) + w["head.cov_bias"]
        m_v = expm2(logm)
    return mu_v, m_v


def dyna_update(pos: Gaussian2, vel: Gaussian2, dt: float) -> Gaussian2:
    """Euler step for the mean; variances add with zero position-velocity covariance."""
    return Gaussian2(pos.mean + dt * vel.mean, pos.cov + dt * dt * vel.cov)


def rollout(params: ModelParams | Mapping, history, env, config: ModelConfig | None = None) -> ForecastDist:
    """Autoregressive forecast over the configured horizon.

    ``history`` holds the last ``t`` observed positions, ``(S, A, t, 2)``.
    """
    if isinstance(params, ModelParams):
        config, w = params.config, params.weights
    else:
        w = params
    history = np.asarray(history, dtype=float)
    if history.shape[-2] < config.history:
        raise ValueError(f"need {config.history} observed steps, got {history.shape[-2]}")
    history = history[..., -config.history:, :]
    dt, k = config.dt, config.horizon
    lead = history.shape[:-2]
    mu = history[..., -1, :]
    vel = np.diff(history, axis=-2) / dt
    cov = np.broadcast_to(config.eps * np.eye(2), lead + (2, 2))
    means, covs, vmeans, vcovs = [], [], [], []
    for _ in range(k):
        mu_v, m_v = forward_step(w, vel, cov, mu, env, config)
        sig_v = ad.matmul2(m_v, ad.swap_last(m_v))
        mu = mu + mu_v * dt
        cov = cov + sig_v * (dt * dt)
        vel = ad.concat([vel[..., 1:, :], ad.reshape(mu_v, lead + (1, 2))], axis=-2)
        means.append(mu)
        covs.append(cov)
        vmeans.append(mu_v)
        vcovs.append(sig_v)
    if k == 0:
        empty = np.zeros(lead + (0, 2))
        return ForecastDist(empty, np.zeros(lead + (0, 2, 2)), empty, np.zeros(lead + (0, 2, 2)))
    fc = ForecastDist(ad.stack(means, axis=-2), ad.stack(covs, axis=-3),
                      ad.stack(vmeans, axis=-2), ad.stack(vcovs, axis=-3))
    for name in ("means", "covs"):
        arr = ad.value(getattr(fc, name))
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise FloatingPointError(f"rollout produced non-finite {name} at index {tuple(bad)}")
    return fc


# ---------------------------------------------------------------- losses

def nll_loss(fc: ForecastDist, truth):
    """Mean negative log-likelihood over scenes, agents and steps."""
    return ad.mean(-log_density(fc.means, fc.covs, np.asarray(truth, dtype=float)))


def mrs_loss(fc: ForecastDist, truth, alpha: float = 0.1):
    """Mean regional score of the Gaussian forecasts."""
    return ad.mean(regional_score(fc.means, fc.covs, np.asarray(truth, dtype=float), alpha))


def loss_fn(name: str, alpha: float = 0.1):
    if name == "nll":
        return nll_loss
    if name == "mrs":
        return lambda fc, truth: mrs_loss(fc, truth, alpha)
    raise ValueError(f"unknown loss '{name}'")


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    loss: str = "nll"
    alpha: float = 0.1
    iterations: int = 300
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 1.0            # global gradient-norm clip
    batch_size: int | None = None
    seed: int = 0
    schedule: str = "constant"   # or "cosine": step size decays to zero over the run

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def step_size(self, it: int) -> float:
        if self.schedule == "cosine" and self.iterations > 0:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * it / self.iterations))
        return self.lr


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


def loss_and_grad(params: ModelParams, history, future, env, loss: str = "nll", alpha: float = 0.1):
    tape = ad.Tape()
    w = {k: tape.variable(v) for k, v in params.weights.items()}
    fc = rollout(w, history, env, params.config)
    value = loss_fn(loss, alpha)(fc, future[..., :params.config.horizon, :])
    tape.backward(value)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in w.items()}
    return float(ad.value(value)), grads


def loss_value(params: ModelParams, history, future, env, loss: str = "nll", alpha: float = 0.1) -> float:
    fc = rollout(params, history, env)
    return float(loss_fn(loss, alpha)(fc, future[..., :params.config.horizon, :]))


def train(params: ModelParams, batch, cfg: TrainConfig = TrainConfig()):
    """Momentum gradient descent on full rollouts.

    ``batch`` is any object with ``history``, ``future`` and ``env`` arrays
    (see :class:`eqtraj.scenes.SceneBatch`).  Returns the trained parameters
    and the loss recorded at every iteration before its update.
    """
    n_scenes = batch.history.shape[0]
    if n_scenes == 0:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}
    history: list[float] = []
    for it in range(cfg.iterations):
        if cfg.batch_size and cfg.batch_size < n_scenes:
            idx = np.sort(rng.choice(n_scenes, cfg.batch_size, replace=False))
        else:
            idx = slice(None)
        try:
            value, grads = loss_and_grad(params, batch.history[idx], batch.future[idx],
                                         batch.env[idx], cfg.loss, cfg.alpha)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", params, history) from exc
        if not math.isfinite(value):
            raise TrainingDiverged(f"iteration {it}: loss is {value}", params, history)
        history.append(value)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = cfg.step_size(it) * (min(1.0, cfg.clip / norm) if norm > 0 else 1.0)
        new = {}
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] - scale * g
            new[k] = params.weights[k] + velocity[k]
        params = ModelParams(params.config, new)
        if it % 50 == 0:
            log.info("iter %d loss %.5f |grad| %.3g", it, value, norm)
    return params, history


def grad_check(params: ModelParams, history, future, env, loss: str = "nll", alpha: float = 0.1,
               n_params: int = 50, h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative gap between tape gradients and central differences.

    The gap for one coordinate is ``|g - fd| / max(|g|, |fd|, 1e-4)``; the
    floor keeps coordinates with near-zero gradient from dominating.
    """
    _, grads = loss_and_grad(params, history, future, env, loss, alpha)
    g_flat = np.concatenate([grads[k].ravel() for k in params.weights])
    base = params.flat()
    rng = np.random.default_rng(seed)
    picks = rng.choice(base.size, min(n_params, base.size), replace=False)
    worst = 0.0
    for i in picks:
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        fd = (loss_value(params.with_flat(up), history, future, env, loss, alpha)
              - loss_value(params.with_flat(down), history, future, env, loss, alpha)) / (2 * h)
        worst = max(worst, abs(g_flat[i] - fd) / max(abs(g_flat[i]), abs(fd), 1e-4))
    return worst


# ---------------------------------------------------------------- baseline

def constant_velocity_baseline(history, horizon: int, dt: float, sigma: float = 1.0,
                               eps: float = 1e-6) -> ForecastDist:
    """Extrapolate the last observed velocity; velocity variance ``sigma^2 I`` per step."""
    if not sigma > 0:
        raise ValueError("sigma must be positive for a valid covariance")
    history = np.asarray(history, dtype=float)
    if history.shape[-2] < 2:
        raise ValueError("constant-velocity forecast needs two observed positions")
    v = (history[..., -1, :] - history[..., -2, :]) / dt
    steps = np.arange(1, horizon + 1)
    means = history[..., -1, None, :] + dt * steps[:, None] * v[..., None, :]
    var = eps + steps * dt * dt * sigma * sigma
    covs = var[:, None, None] * np.eye(2)
    covs = np.broadcast_to(covs, means.shape[:-1] + (2, 2)).copy()
    vel_means = np.broadcast_to(v[..., None, :], means.shape).copy()
    vel_covs = np.broadcast_to(sigma * sigma * np.eye(2), covs.shape).copy()
    return ForecastDist(means, covs, vel_means, vel_covs)


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant)
