"""Flow-matching training with guidance-augmented targets.

The strong net regresses the interpolant velocity u = eps - x0. W2S
variants replace the target with u + w * sg[g] inside a time interval,
where g is a strong-minus-weak direction computed from the current
parameters and treated as a constant:

  MG        g = v(x_t, t, c) - v(x_t, t, null)      (needs condition dropout)
  AG        g = v(x_t, t, c) - v_weak(x_t, t, c)    (separate smaller net,
            updated once every `weak_update_ratio` strong steps)
  BR        g = v(x_t, t, c) - v_branch(x_t, t, c)  (auxiliary head, trained
            on the plain target concurrently; no extra forward)
  SGG       MG direction for t > tau, BR direction for t <= tau
  SLG_warm  g = v(x_t, t, c) - v_skip(x_t, t, c) after a plain-regression
            warm-up (layer-skip weak signals destabilize cold starts)

Every RNG consumer (batch draws, dropout, weak-model batches) runs on its
own substream of the config seed, so any variant at w = 0 traces the exact
baseline parameter trajectory.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace

import numpy as np

from ._malloc import tune_malloc
from .mixture import Dataset, MixtureSpec, sample_points
from .net import (
    Arch,
    NetParams,
    OptState,
    adam_step,
    backward,
    forward,
    init_opt_state,
    init_params,
)

VARIANTS = ("baseline", "MG", "AG", "BR", "SGG", "SLG_warm")

# training-time guidance weights when the config leaves w unset
DEFAULT_W = {"baseline": 0.0, "MG": 0.5, "AG": 0.3, "BR": 0.3, "SGG": 0.6, "SLG_warm": 0.3}

CDG_VARIANTS = ("MG", "SGG")  # need conditions (and dropout) to exist


@dataclass
class TrainConfig:
    variant: str = "baseline"
    w: float | None = None
    tau: float = 0.2
    interval: tuple[float, float] = (0.2, 0.8)
    cond_dropout: float = 0.1
    iters: int = 2**12
    batch: int = 256
    lr: float = 1e-4
    lognormal_loc: float = 0.0
    lognormal_scale: float = 1.0
    weak_update_ratio: int = 4
    weak_arch: Arch | None = None
    warmup_iters: int | None = None
    skip_blocks: tuple[int, ...] | None = None
    seed: int = 0
    unconditional: bool = False
    arch: Arch = field(default_factory=Arch)
    log_every: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.w is None:
            self.w = DEFAULT_W[self.variant]
        if self.w < 0:
            raise ValueError("w must be >= 0")
        if self.variant == "SGG" and not (0.0 < self.tau < 1.0):
            raise ValueError("SGG requires tau in (0, 1)")
        if self.interval[0] > self.interval[1]:
            raise ValueError("interval must satisfy t_lo <= t_hi")
        if not (0.0 <= self.cond_dropout < 1.0):
            raise ValueError("cond_dropout must be in [0, 1)")
        if self.iters < 0 or self.batch < 1:
            raise ValueError("bad iteration/batch count")
        if self.variant in CDG_VARIANTS:
            if self.unconditional:
                raise ValueError(f"{self.variant} needs conditions; unconditional mode is CAG-only")
            if self.cond_dropout <= 0.0:
                raise ValueError(f"{self.variant} requires cond_dropout > 0")
        if self.variant == "AG":
            if self.weak_update_ratio < 1:
                raise ValueError("weak_update_ratio must be >= 1")
            if self.weak_arch is None:
                self.weak_arch = replace(self.arch, d_h=self.arch.d_h // 2)
        if self.variant in ("BR", "SGG") and self.arch.branch_index is None:
            raise ValueError(f"{self.variant} requires an arch with a branch head")
        if self.variant == "SLG_warm":
            if self.warmup_iters is None:
                self.warmup_iters = self.iters // 4
            if self.skip_blocks is None:
                self.skip_blocks = (self.arch.n_blocks // 2,)


@dataclass
class TrainingPair:
    """One batch of interpolant couplings (fields are (B, ...) arrays)."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u: np.ndarray
    class_label: np.ndarray
    dropped: np.ndarray


@dataclass
class RunLog:
    records: list = field(default_factory=list)  # dicts per logged interval
    checkpoint_ref: str = ""

    FIELDS = ("iteration", "loss", "aux_loss", "g_norm_mean")

    def append(self, rec: dict):
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("run log iterations must be monotone")
        self.records.append(rec)

    def to_csv(self) -> str:
        """Deterministic columns only; wall times stay in the records."""
        lines = [",".join(self.FIELDS)]
        for rec in self.records:
            lines.append(",".join(repr(float(rec[k])) if k != "iteration" else str(rec[k]) for k in self.FIELDS))
        return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    config: TrainConfig
    source: object
    params: NetParams
    opt: OptState
    weak_params: NetParams | None
    weak_opt: OptState | None
    batch_rng: np.random.Generator
    dropout_rng: np.random.Generator
    weak_batch_rng: np.random.Generator
    weak_dropout_rng: np.random.Generator
    iteration: int = 0
    weak_steps: int = 0
    runlog: RunLog = field(default_factory=RunLog)


@dataclass
class TrainResult:
    params: NetParams
    weak_params: NetParams | None
    runlog: RunLog


def sample_timesteps(loc: float, scale: float, size, rng) -> np.ndarray:
    """Logit-normal times: t = sigmoid(z), z ~ N(loc, scale^2)."""
    if not scale > 0:
        raise ValueError("scale must be > 0")
    z = rng.normal(loc, scale, size=size)
    t = 1.0 / (1.0 + np.exp(-z))
    return np.clip(t, 1e-5, 1.0 - 1e-5)


def sample_timestep(loc: float, scale: float, rng) -> float:
    return float(sample_timesteps(loc, scale, None, rng))


def source_classes(source) -> np.ndarray:
    if isinstance(source, MixtureSpec):
        return np.asarray(source.selected_classes)
    return np.unique(source.labels)


def _num_classes(source) -> int:
    if isinstance(source, MixtureSpec):
        return source.num_classes
    return int(source.labels.max())


def draw_batch(source, n: int, rng, loc: float, scale: float) -> TrainingPair:
    if isinstance(source, MixtureSpec):
        x0, labels, _ = sample_points(source, n, rng)
    else:
        idx = rng.integers(0, source.points.shape[0], size=n)
        x0 = source.points[idx]
        labels = source.labels[idx]
    eps = rng.standard_normal((n, 2))
    t = sample_timesteps(loc, scale, n, rng)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    return TrainingPair(x0, eps, t, x_t, eps - x0, labels, np.zeros(n, dtype=bool))


def weak_velocity(variant: str, strong_params: NetParams, weak_params, pair: TrainingPair, cond, tau: float = 0.2):
    """The variant's weak signal on a batch (numeric values only; callers
    treat the result as a constant)."""
    if variant == "MG":
        return forward(strong_params, pair.x_t, pair.t, None).velocity
    if variant == "AG":
        if weak_params is None:
            raise ValueError("AG needs a weak model")
        return forward(weak_params, pair.x_t, pair.t, cond).velocity
    if variant == "BR":
        return forward(strong_params, pair.x_t, pair.t, cond, want_branch=True).branch_velocity
    if variant == "SGG":
        v_mg = weak_velocity("MG", strong_params, weak_params, pair, cond)
        v_br = weak_velocity("BR", strong_params, weak_params, pair, cond)
        return np.where((pair.t > tau)[:, None], v_mg, v_br)
    raise ValueError(f"variant {variant!r} has no weak signal")


def w2s_target(u: np.ndarray, g: np.ndarray, w: float, t, interval) -> np.ndarray:
    """u + w * g inside the guidance interval, plain u outside; g enters as
    a constant (stop-gradient)."""
    if w == 0.0:
        return u
    t = np.asarray(t, dtype=np.float64)
    gate = (t >= interval[0]) & (t <= interval[1])
    return np.where(gate.reshape(-1, 1), u + w * g, u)


def _effective_cond(state: TrainState, pair: TrainingPair):
    cfg = state.config
    if cfg.unconditional:
        return np.zeros(pair.x0.shape[0], dtype=np.int64)
    drop = state.dropout_rng.random(pair.x0.shape[0]) < cfg.cond_dropout
    pair.dropped = drop
    return np.where(drop, 0, pair.class_label)


def _guidance_direction(state: TrainState, pair: TrainingPair, cond, v_pred, res):
    """g for the current variant, or None when no guidance applies. The
    traced prediction stands in for the strong forward (identical values)."""
    cfg = state.config
    if cfg.variant == "baseline":
        return None
    if cfg.variant == "MG":
        return v_pred - forward(state.params, pair.x_t, pair.t, None).velocity
    if cfg.variant == "AG":
        return v_pred - forward(state.weak_params, pair.x_t, pair.t, cond).velocity
    if cfg.variant == "BR":
        return v_pred - res.branch_velocity
    if cfg.variant == "SGG":
        v_null = forward(state.params, pair.x_t, pair.t, None).velocity
        return np.where((pair.t > cfg.tau)[:, None], v_pred - v_null, v_pred - res.branch_velocity)
    # SLG_warm
    if state.iteration < cfg.warmup_iters:
        return None
    v_skip = forward(state.params, pair.x_t, pair.t, cond, skip_blocks=cfg.skip_blocks).velocity
    return v_pred - v_skip


def train_step(state: TrainState) -> dict:
    """One optimizer step on the strong loss (plus the variant's auxiliary
    weak-source update). Returns the loss record."""
    cfg = state.config
    n = cfg.batch
    pair = draw_batch(state.source, n, state.batch_rng, cfg.lognormal_loc, cfg.lognormal_scale)
    cond = _effective_cond(state, pair)

    want_branch = cfg.variant in ("BR", "SGG")
    res = forward(state.params, pair.x_t, pair.t, cond, want_trace=True, want_branch=want_branch)
    v_pred = res.velocity

    g = _guidance_direction(state, pair, cond, v_pred, res)
    if g is None:
        target = pair.u
        g_norm = 0.0
    else:
        target = w2s_target(pair.u, g, cfg.w, pair.t, cfg.interval)
        g_norm = float(np.sqrt(np.sum(g * g, axis=1)).mean())

    resid = v_pred - target
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite training loss at iteration {state.iteration} "
            f"(variant={cfg.variant}, w={cfg.w}, g_norm={g_norm:g})"
        )
    grad_v = (2.0 / n) * resid

    aux_loss = 0.0
    grad_branch = None
    if want_branch:
        br_resid = res.branch_velocity - pair.u
        aux_loss = float(np.mean(np.sum(br_resid * br_resid, axis=1)))
        grad_branch = (2.0 / n) * br_resid

    grads = backward(state.params, res.trace, grad_v, grad_branch)
    adam_step(state.params, grads, state.opt)

    if cfg.variant == "AG" and state.iteration % cfg.weak_update_ratio == 0:
        aux_loss = _weak_step(state)

    record = {
        "iteration": state.iteration,
        "loss": loss,
        "aux_loss": aux_loss,
        "g_norm_mean": g_norm,
        "wall_s": time.perf_counter(),
    }
    state.iteration += 1
    return record


def _weak_step(state: TrainState) -> float:
    """Plain regression step for the AG weak model on its own substreams."""
    cfg = state.config
    pair = draw_batch(state.source, cfg.batch, state.weak_batch_rng, cfg.lognormal_loc, cfg.lognormal_scale)
    if cfg.unconditional:
        cond = np.zeros(cfg.batch, dtype=np.int64)
    else:
        drop = state.weak_dropout_rng.random(cfg.batch) < cfg.cond_dropout
        cond = np.where(drop, 0, pair.class_label)
    res = forward(state.weak_params, pair.x_t, pair.t, cond, want_trace=True)
    resid = res.velocity - pair.u
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads = backward(state.weak_params, res.trace, (2.0 / cfg.batch) * resid)
    adam_step(state.weak_params, grads, state.weak_opt)
    state.weak_steps += 1
    return loss


def init_train_state(config: TrainConfig, source) -> TrainState:
    if not isinstance(source, (MixtureSpec, Dataset)):
        raise TypeError("source must be a MixtureSpec or Dataset")
    streams = np.random.SeedSequence(config.seed).spawn(6)
    num_classes = _num_classes(source)
    params = init_params(config.arch, num_classes, streams[0])
    weak_params = weak_opt = None
    if config.variant == "AG":
        weak_params = init_params(config.weak_arch, num_classes, streams[1])
        weak_opt = init_opt_state(weak_params, lr=config.lr)
    return TrainState(
        config=config,
        source=source,
        params=params,
        opt=init_opt_state(params, lr=config.lr),
        weak_params=weak_params,
        weak_opt=weak_opt,
        batch_rng=np.random.default_rng(streams[2]),
        dropout_rng=np.random.default_rng(streams[3]),
        weak_batch_rng=np.random.default_rng(streams[4]),
        weak_dropout_rng=np.random.default_rng(streams[5]),
    )


def _single_thread_blas():
    """Batch-size matmuls lose to thread sync overhead; pin to one thread."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        return nullcontext()


def train_loop(config: TrainConfig, source, progress=None) -> TrainResult:
    """Run the configured training to completion; deterministic per seed."""
    tune_malloc()
    state = init_train_state(config, source)
    start = time.perf_counter()
    with _single_thread_blas():
        for i in range(config.iters):
            rec = train_step(state)
            if i % config.log_every == 0 or i == config.iters - 1:
                rec["wall_s"] = time.perf_counter() - start
                state.runlog.append(rec)
                if progress is not None:
                    progress(rec)
    return TrainResult(state.params, state.weak_params, state.runlog)
