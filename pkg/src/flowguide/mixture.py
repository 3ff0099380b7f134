"""Recursive class-conditional 2D Gaussian mixtures.

A single main branch is split into ``num_classes`` segments; each segment
anchors a class-specific subbranch that recursively spawns children up to
``max_depth``. Every branch segment emits a handful of anisotropic Gaussian
components (thin across the branch, elongated along it), with raw weights
decaying geometrically in depth. The normalized per-class mixture is the
ground-truth data distribution and doubles as an exact density/velocity
oracle source.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# Components on the main trunk carry this label; they are never part of a
# selectable class and exist only so the full tree geometry is serialized.
BASE_LABEL = 0

FORMAT_VERSION = 1

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted 2D Gaussian, tagged with its class (or BASE_LABEL)."""

    weight_raw: float
    mean: np.ndarray  # (2,)
    cov: np.ndarray   # (2, 2) symmetric positive definite
    class_label: int

    def __post_init__(self):
        if not self.weight_raw > 0:
            raise ValueError(f"component weight must be > 0, got {self.weight_raw}")
        mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(2, 2)
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        eigs = np.linalg.eigvalsh(cov)
        if np.any(eigs <= 0):
            raise ValueError(f"covariance not positive definite (eigenvalues {eigs})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class ToyConfig:
    """Knobs of the recursive construction.

    num_classes/max_depth/branch_factor are the (CLS, Depth, B) tuple that
    controls condition granularity and in-class complexity; the remaining
    geometry fields have visually tuned defaults and are not load-bearing.
    """

    num_classes: int
    max_depth: int
    branch_factor: int
    seed: int = 0
    scale: tuple[float, float] = (1.0, 1.0)
    base_point: tuple[float, float] = (0.0, -1.0)
    main_angle_deg: float = 85.0
    depth_decay: float = 0.6
    points_per_branch: int = 3
    child_angle_deg: float = 35.0
    child_length_factor: float = 0.55
    curvature_deg: float = 0.0
    thickness_across: float = 0.03
    thickness_along: float = 0.08
    # initial subbranch size as a multiple of the trunk segment length
    subbranch_size_factor: float = 2.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.branch_factor < 1:
            raise ValueError("branch_factor must be >= 1")
        if not (0.0 < self.depth_decay <= 1.0):
            raise ValueError("depth_decay must be in (0, 1]")
        if self.points_per_branch < 1:
            raise ValueError("points_per_branch must be >= 1")


class MixtureSpec:
    """Normalized class-conditional Gaussian mixture.

    Immutable after construction; per-class component indices and normalized
    weights are precomputed. Class labels run 1..num_classes; BASE_LABEL
    components are kept in the table but are not selectable.
    """

    def __init__(self, components, num_classes, selected_classes=None):
        self.components = tuple(components)
        self.num_classes = int(num_classes)
        if selected_classes is None:
            selected_classes = range(1, self.num_classes + 1)
        self.selected_classes = tuple(sorted(set(int(c) for c in selected_classes)))
        if not self.selected_classes:
            raise ValueError("at least one class must be selected")
        for c in self.selected_classes:
            if not (1 <= c <= self.num_classes):
                raise ValueError(f"selected class {c} outside 1..{self.num_classes}")

        labels = np.array([comp.class_label for comp in self.components], dtype=np.int64)
        self._means = np.array([comp.mean for comp in self.components], dtype=np.float64)
        self._covs = np.array([comp.cov for comp in self.components], dtype=np.float64)
        self._chols = np.linalg.cholesky(self._covs)
        raw = np.array([comp.weight_raw for comp in self.components], dtype=np.float64)

        self._class_idx: dict[int, np.ndarray] = {}
        self._class_pi: dict[int, np.ndarray] = {}
        for c in self.selected_classes:
            idx = np.nonzero(labels == c)[0]
            if idx.size == 0:
                raise ValueError(f"class {c} has no components")
            pi = raw[idx] / raw[idx].sum()
            self._class_idx[c] = idx
            self._class_pi[c] = pi

    # -- per-class accessors -------------------------------------------------

    def class_indices(self, c: int) -> np.ndarray:
        return self._class_idx[int(c)]

    def class_weights(self, c: int) -> np.ndarray:
        """Normalized mixture weights pi_i of class c (sums to 1)."""
        return self._class_pi[int(c)]

    def class_params(self, c):
        """(weights, means, covs) arrays for one class."""
        idx = self.class_indices(c)
        return self._class_pi[int(c)], self._means[idx], self._covs[idx]

    def class_mean(self, c: int) -> np.ndarray:
        """Exact mixture mean of class c."""
        pi, means, _ = self.class_params(c)
        return pi @ means

    def sample_class(self, c: int, m: int, rng):
        """m ancestral draws from class c; returns (points, component_idx)."""
        idx = self.class_indices(c)
        chosen = rng.choice(idx, size=m, p=self.class_weights(c))
        z = rng.standard_normal((m, 2))
        pts = self._means[chosen] + np.einsum("nij,nj->ni", self._chols[chosen], z)
        return pts, chosen

    def cond_params(self, c):
        """Weights/means/covs for class c, or the class-marginalized mixture
        (uniform class prior over selected classes) when c is None."""
        if c is not None:
            return self.class_params(c)
        parts_w, parts_m, parts_c = [], [], []
        prior = 1.0 / len(self.selected_classes)
        for cls in self.selected_classes:
            pi, means, covs = self.class_params(cls)
            parts_w.append(pi * prior)
            parts_m.append(means)
            parts_c.append(covs)
        return np.concatenate(parts_w), np.concatenate(parts_m), np.concatenate(parts_c)

    # -- density ---------------------------------------------------------------

    def log_density(self, x, c=None, t: float = 0.0):
        """log p_t(x | c) under the forward-noised mixture.

        At time t the component means shrink to (1-t)*mu and covariances
        become (1-t)^2*Sigma + t^2*I (exact for the linear interpolant path).
        c=None marginalizes over selected classes with a uniform prior.
        Accepts a single point (2,) or a batch (n, 2); returns scalar or (n,).
        """
        if not (0.0 <= t < 1.0):
            raise ValueError(f"t must be in [0, 1), got {t}")
        pi, means, covs = self.cond_params(c)
        if t > 0.0:
            means = (1.0 - t) * means
            covs = (1.0 - t) ** 2 * covs + t**2 * np.eye(2)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x.reshape(1, 2) if single else x
        out = np.empty(pts.shape[0], dtype=np.float64)
        log_pi = np.log(pi)
        # chunked so big batches never materialize an (n, K, 2) temp
        for lo in range(0, pts.shape[0], 8192):
            chunk = pts[lo : lo + 8192]
            lp = gaussian_logpdf(chunk, means, covs)  # (m, K)
            out[lo : lo + 8192] = logsumexp(lp + log_pi, axis=1)
        return float(out[0]) if single else out

    def noised(self, t: float) -> "MixtureSpec":
        """The spec whose t=0 density equals this spec's density at time t."""
        if not (0.0 <= t < 1.0):
            raise ValueError(f"t must be in [0, 1), got {t}")
        comps = [
            GaussianComponent(
                weight_raw=comp.weight_raw,
                mean=(1.0 - t) * comp.mean,
                cov=(1.0 - t) ** 2 * comp.cov + t**2 * np.eye(2),
                class_label=comp.class_label,
            )
            for comp in self.components
        ]
        return MixtureSpec(comps, self.num_classes, self.selected_classes)

    # -- serialization -----------------------------------------------------------

    def to_text(self) -> str:
        """Versioned key/value header plus one component per table row."""
        buf = io.StringIO()
        buf.write("# flowguide mixture\n")
        buf.write(f"format_version {FORMAT_VERSION}\n")
        buf.write(f"num_classes {self.num_classes}\n")
        buf.write("selected_classes " + ",".join(str(c) for c in self.selected_classes) + "\n")
        buf.write(f"components {len(self.components)}\n")
        buf.write("# label weight mean_x mean_y cov_xx cov_xy cov_yy\n")
        for comp in self.components:
            row = [
                str(comp.class_label),
                repr(float(comp.weight_raw)),
                repr(float(comp.mean[0])),
                repr(float(comp.mean[1])),
                repr(float(comp.cov[0, 0])),
                repr(float(comp.cov[0, 1])),
                repr(float(comp.cov[1, 1])),
            ]
            buf.write(" ".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "MixtureSpec":
        header: dict[str, str] = {}
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, rest = line.split(maxsplit=1)
            if key in ("format_version", "num_classes", "selected_classes", "components"):
                header[key] = rest
            else:
                rows.append((key, rest))
        version = int(header["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported mixture format version {version}")
        comps = []
        for label, rest in rows:
            vals = [float(v) for v in rest.split()]
            w, mx, my, cxx, cxy, cyy = vals
            comps.append(
                GaussianComponent(
                    weight_raw=w,
                    mean=np.array([mx, my]),
                    cov=np.array([[cxx, cxy], [cxy, cyy]]),
                    class_label=int(label),
                )
            )
        n_expected = int(header["components"])
        if len(comps) != n_expected:
            raise ValueError(f"expected {n_expected} components, parsed {len(comps)}")
        selected = tuple(int(c) for c in header["selected_classes"].split(","))
        return cls(comps, int(header["num_classes"]), selected)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass
class Dataset:
    """Finite labeled point set drawn from a MixtureSpec."""

    points: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,)
    source_spec_hash: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points/labels length mismatch")

    def class_points(self, c=None) -> np.ndarray:
        if c is None:
            return self.points
        return self.points[self.labels == int(c)]

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("# flowguide dataset\n")
        buf.write(f"format_version {FORMAT_VERSION}\n")
        buf.write(f"source_spec_hash {self.source_spec_hash}\n")
        buf.write(f"points {self.points.shape[0]}\n")
        buf.write("x,y,class\n")
        for (x, y), c in zip(self.points, self.labels):
            buf.write(f"{float(x)!r},{float(y)!r},{int(c)}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Dataset":
        header: dict[str, str] = {}
        pts, labels = [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line == "x,y,class":
                continue
            if "," in line:
                x, y, c = line.split(",")
                pts.append((float(x), float(y)))
                labels.append(int(c))
            else:
                key, rest = line.split(maxsplit=1)
                header[key] = rest
        if int(header["format_version"]) != FORMAT_VERSION:
            raise ValueError("unsupported dataset format version")
        ds = cls(np.array(pts), np.array(labels), header.get("source_spec_hash", ""))
        if ds.points.shape[0] != int(header["points"]):
            raise ValueError("dataset point count mismatch")
        return ds


def gaussian_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Batched 2D Gaussian log-densities.

    x: (n, 2); means: (K, 2); covs: (K, 2, 2). Returns (n, K).
    """
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    d = covs[:, 1, 1]
    det = a * d - b * b
    diff = x[:, None, :] - means[None, :, :]  # (n, K, 2)
    dx, dy = diff[..., 0], diff[..., 1]
    quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * quad


def rotation(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s], [s, c]])


def _branch_components(config, origin, angle, size, depth, label, out):
    """Emit the Gaussians of one straight branch segment, then recurse."""
    direction = np.array([math.cos(angle), math.sin(angle)])
    rot = rotation(angle)
    # along-branch axis first so D pairs (long, thin) with (u, u_perp)
    diag = np.diag(
        [
            (config.thickness_along * size) ** 2,
            (config.thickness_across * size) ** 2,
        ]
    )
    cov = rot @ diag @ rot.T
    cov = 0.5 * (cov + cov.T)
    weight = size * config.depth_decay**depth
    scale = np.asarray(config.scale, dtype=np.float64)
    for j in range(config.points_per_branch):
        lam = (j + 1) / (config.points_per_branch + 1)
        mean = (origin + lam * size * direction) * scale
        out.append(GaussianComponent(weight, mean, cov, label))
    if depth + 1 >= config.max_depth:
        return
    tip = origin + size * direction
    offsets = _child_offsets(config.branch_factor, config.child_angle_deg)
    for off in offsets:
        child_angle = angle + math.radians(off + config.curvature_deg)
        _branch_components(
            config,
            tip,
            child_angle,
            config.child_length_factor * size,
            depth + 1,
            label,
            out,
        )


def _child_offsets(branch_factor: int, child_angle_deg: float):
    if branch_factor == 1:
        return [0.0]
    return list(np.linspace(-child_angle_deg, child_angle_deg, branch_factor))


def build_recursive_mixture(config: ToyConfig) -> MixtureSpec:
    """Deterministically assemble the branching mixture for one config."""
    cls = config.num_classes
    main_len = 0.4 * (1.0 + 0.1 * cls)
    alpha = math.radians(config.main_angle_deg)
    base = np.asarray(config.base_point, dtype=np.float64)
    trunk_dir = np.array([math.cos(alpha), math.sin(alpha)])
    seg_len = main_len / cls
    scale = np.asarray(config.scale, dtype=np.float64)

    comps: list[GaussianComponent] = []
    # trunk segments (base-labeled, cosmetic: never selectable)
    trunk_rot = rotation(alpha)
    trunk_diag = np.diag(
        [
            (config.thickness_along * seg_len) ** 2,
            (config.thickness_across * seg_len) ** 2,
        ]
    )
    trunk_cov = trunk_rot @ trunk_diag @ trunk_rot.T
    trunk_cov = 0.5 * (trunk_cov + trunk_cov.T)
    for i in range(cls):
        seg_start = base + i * seg_len * trunk_dir
        for j in range(config.points_per_branch):
            lam = (j + 1) / (config.points_per_branch + 1)
            mean = (seg_start + lam * seg_len * trunk_dir) * scale
            comps.append(GaussianComponent(seg_len, mean, trunk_cov, BASE_LABEL))

    # one class subbranch per trunk segment, alternating sides
    size0 = config.subbranch_size_factor * seg_len
    for i in range(cls):
        attach = base + (i + 1) * seg_len * trunk_dir
        side = 1.0 if i % 2 == 0 else -1.0
        angle = alpha + side * math.radians(config.child_angle_deg)
        _branch_components(config, attach, angle, size0, 0, i + 1, comps)

    for comp in comps:
        eigs = np.linalg.eigvalsh(comp.cov)
        if np.any(eigs <= 0):
            raise ValueError("generated covariance is not positive definite")
    return MixtureSpec(comps, cls)


def preset_config(name: str) -> ToyConfig:
    """The three representative (CLS, Depth, B) regimes."""
    presets = {
        "A": ToyConfig(num_classes=4, max_depth=3, branch_factor=2),
        "B": ToyConfig(num_classes=24, max_depth=1, branch_factor=2),
        "C": ToyConfig(num_classes=12, max_depth=2, branch_factor=2),
    }
    key = str(name).upper()
    if key not in presets:
        raise ValueError(f"unknown preset {name!r}; expected one of A, B, C")
    return presets[key]


def sample_points(spec: MixtureSpec, n: int, seed):
    """Ancestral sampling; also returns the generating component index of
    every point (into spec.components) for occupancy checks."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    classes = np.asarray(spec.selected_classes)
    labels = rng.choice(classes, size=n)
    points = np.empty((n, 2), dtype=np.float64)
    comp_of = np.empty(n, dtype=np.int64)
    for c in classes:
        mask = labels == c
        m = int(mask.sum())
        if m == 0:
            continue
        pts, chosen = spec.sample_class(int(c), m, rng)
        points[mask] = pts
        comp_of[mask] = chosen
    return points, labels, comp_of


def sample_dataset(spec: MixtureSpec, n: int, seed) -> Dataset:
    points, labels, _ = sample_points(spec, n, seed)
    return Dataset(points, labels, spec.digest())
