"""Reverse-time samplers for velocity-field generators.

Both samplers integrate from t_start (pure noise) down to t_end on a
uniform grid. The ODE sampler is plain Euler on dx = v dt. The SDE sampler
is Euler-Maruyama on the churned reverse SDE whose marginals match the ODE:
with score s = -(x + (1 - t) v) / t (the flow-matching posterior-mean
identity) and diffusion g(t)^2 = 2 * churn * t, the reverse drift is
v - churn * t * s = v + churn * (x + (1 - t) v). churn=0 reproduces the ODE
trajectory bit-for-bit because both samplers share per-chain noise streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLER_KINDS = ("ode_euler", "sde_euler_maruyama")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ode_euler"
    steps: int = 128
    t_start: float = 1.0
    t_end: float = 1e-3
    churn: float = 1.0  # SDE only

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (self.t_start > self.t_end >= 0.0):
            raise ValueError("need t_start > t_end >= 0")
        if self.churn < 0.0:
            raise ValueError("churn must be >= 0")


@dataclass
class SampleBatch:
    finals: np.ndarray        # (n, 2)
    class_labels: np.ndarray  # (n,) condition values; 0 = unconditional
    trajectories: np.ndarray | None = None  # (steps + 1, n, 2)
    guidance_label: str = "unguided"


def uniform_prompts(classes, n: int, seed) -> np.ndarray:
    """n class prompts drawn uniformly from the given pool."""
    rng = np.random.default_rng(seed)
    return rng.choice(np.asarray(classes, dtype=np.int64), size=n)


def _chain_noise(seed, n: int, rows: int) -> np.ndarray:
    """Per-chain noise, (n, rows, 2). Chain i consumes an independent
    deterministic substream; row 0 is the initial state."""
    out = np.empty((n, rows, 2))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        out[i] = np.random.Generator(np.random.PCG64(child)).standard_normal((rows, 2))
    return out


def _resolve_labels(class_labels, n: int) -> np.ndarray:
    if class_labels is None:
        return np.zeros(n, dtype=np.int64)
    labels = np.broadcast_to(np.asarray(class_labels, dtype=np.int64), (n,)).copy()
    return labels


def _integrate(velocity_fn, sampler: SamplerSpec, n, class_labels, seed, record, sde: bool):
    labels = _resolve_labels(class_labels, n)
    noise = _chain_noise(seed, n, 1 + (sampler.steps if sde else 0))
    x = noise[:, 0, :].copy()
    ts = np.linspace(sampler.t_start, sampler.t_end, sampler.steps + 1)
    groups = [(c, np.nonzero(labels == c)[0]) for c in np.unique(labels)]

    traj = None
    if record:
        traj = np.empty((sampler.steps + 1, n, 2))
        traj[0] = x

    v = np.empty_like(x)
    for k in range(sampler.steps):
        t = float(ts[k])
        dt = float(ts[k] - ts[k + 1])
        for c, idx in groups:
            v[idx] = velocity_fn(x[idx], t, None if c == 0 else int(c))
        if sde and sampler.churn > 0.0:
            drift = v + sampler.churn * (x + (1.0 - t) * v)
            x = x - dt * drift + np.sqrt(2.0 * sampler.churn * t * dt) * noise[:, 1 + k, :]
        else:
            x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at sampler step {k} (t={t:g})")
        if record:
            traj[k + 1] = x
    return SampleBatch(x, labels, traj)


def sample_ode(velocity_fn, sampler: SamplerSpec, n: int, class_labels=None, seed=0, record_trajectories=False) -> SampleBatch:
    """Euler integration of the reverse ODE from standard-normal noise."""
    return _integrate(velocity_fn, sampler, n, class_labels, seed, record_trajectories, sde=False)


def sample_sde(velocity_fn, sampler: SamplerSpec, n: int, class_labels=None, seed=0, record_trajectories=False) -> SampleBatch:
    """Euler-Maruyama integration of the churned reverse SDE."""
    return _integrate(velocity_fn, sampler, n, class_labels, seed, record_trajectories, sde=True)
