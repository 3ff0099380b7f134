"""Weak-to-strong guided velocity assembly.

All guidance kinds share one extrapolation: v_guided = v + (w - 1) * g,
where g is the strong-minus-weak direction. Kinds differ only in the weak
signal: the null-condition output of the same net (CDG_cfg), an inferior
condition-aligned model (CAG_ag), a layer-skipped forward of the strong net
(CAG_skip), or a time-segmented switch between the CDG and CAG directions
(SGG). Unit scales and out-of-interval times return the conditional
velocity bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("none", "CDG_cfg", "CAG_ag", "CAG_skip", "SGG")

CAG_KINDS = ("CAG_ag", "CAG_skip")


@dataclass(frozen=True)
class GuidanceSpec:
    """One guidance policy.

    w applies to single-scale kinds; SGG uses w_cdg above tau and w_cag at
    or below it. Guidance is active only for t inside [interval[0],
    interval[1]]; outside, the plain conditional velocity is returned.
    """

    kind: str = "none"
    w: float = 1.0
    w_cdg: float = 1.0
    w_cag: float = 1.0
    tau: float = 0.2
    interval: tuple[float, float] = (0.0, 1.0)
    skip_blocks: tuple[int, ...] = ()
    weak_checkpoint: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "SGG" and not (0.0 < self.tau < 1.0):
            raise ValueError("SGG requires tau in (0, 1)")
        if self.kind == "CAG_skip" and not self.skip_blocks:
            raise ValueError("CAG_skip requires skip_blocks")
        if self.interval[0] > self.interval[1]:
            raise ValueError("interval must satisfy t_lo <= t_hi")

    @property
    def guidance_label(self) -> str:
        if self.label is not None:
            return self.label
        if self.kind == "none":
            return "unguided"
        if self.kind == "SGG":
            return f"SGG(tau={self.tau},w={self.w_cdg}/{self.w_cag})"
        return f"{self.kind}(w={self.w})"

    def needs_weak_fn(self) -> bool:
        return self.kind in CAG_KINDS or self.kind == "SGG"


def _extrapolate(v_strong, v_weak, w: float):
    if w == 1.0:
        return v_strong
    return v_strong + (w - 1.0) * (v_strong - v_weak)


def guided_velocity(strong_fn, weak_fn, g: GuidanceSpec, x, t: float, cond):
    """Guided velocity at one (scalar) time for a batch of states.

    strong_fn(x, t, cond) must accept cond=0/None for the null condition;
    weak_fn is the inferior condition-aligned model required by CAG kinds
    (for SGG it supplies the low-noise segment).
    """
    t = float(t)
    v_c = strong_fn(x, t, cond)
    lo, hi = g.interval
    if not (lo <= t <= hi) or g.kind == "none":
        return v_c
    if g.kind == "CDG_cfg":
        return _extrapolate(v_c, strong_fn(x, t, None), g.w)
    if g.kind in CAG_KINDS:
        if weak_fn is None:
            raise ValueError(f"{g.kind} requires a weak model function")
        return _extrapolate(v_c, weak_fn(x, t, cond), g.w)
    # SGG: condition-dependent direction at high noise, condition-agnostic
    # refinement at low noise
    if t > g.tau:
        return _extrapolate(v_c, strong_fn(x, t, None), g.w_cdg)
    if weak_fn is None:
        raise ValueError("SGG requires a weak model function for t <= tau")
    return _extrapolate(v_c, weak_fn(x, t, cond), g.w_cag)


def guided_fn(strong_fn, weak_fn, g: GuidanceSpec):
    """Close over a guidance policy: (x, t, cond) -> guided velocity."""

    def fn(x, t, cond=None):
        return guided_velocity(strong_fn, weak_fn, g, x, t, cond)

    return fn
