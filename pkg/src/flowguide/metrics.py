"""Quantitative 2D sample metrics.

Three numbers operationalize the failure modes guidance trades off:
outlier_rate (samples below a ground-truth log-density floor, off-manifold
artifacts), mode_coverage (fraction of mixture components reached by a
same-class sample, mode-seeking collapse), and class_accuracy (density
argmax agreement with the prompt, condition adherence). velocity_field_mse
measures a model's distance to the exact optimal velocity on forward-noised
ground-truth states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mixture import Dataset, MixtureSpec, sample_points

DEFAULT_FLOOR_QUANTILE = 1e-3
DEFAULT_FLOOR_SAMPLES = 100_000
DEFAULT_FLOOR_SEED = 2_000_000
DEFAULT_RADIUS_SIGMAS = 2.0

_floor_cache: dict[tuple, float] = {}


@dataclass
class EvalReport:
    guidance_label: str
    n_samples: int
    outlier_rate: float
    mode_coverage: float
    class_accuracy: float
    mean_nll: float
    log_density_floor: float
    radius_sigmas: float
    per_class: dict = field(default_factory=dict)  # label -> dict of rates

    CSV_FIELDS = (
        "guidance_label",
        "n_samples",
        "outlier_rate",
        "mode_coverage",
        "class_accuracy",
        "mean_nll",
        "log_density_floor",
        "radius_sigmas",
    )

    def csv_row(self) -> str:
        vals = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            vals.append(str(v) if isinstance(v, (int, str)) else repr(float(v)))
        return ",".join(vals)

    def pretty(self) -> str:
        lines = [
            f"guidance:        {self.guidance_label}",
            f"samples:         {self.n_samples}",
            f"outlier rate:    {self.outlier_rate:.4f}  (floor {self.log_density_floor:.3f})",
            f"mode coverage:   {self.mode_coverage:.4f}  (radius {self.radius_sigmas:g} sigma)",
            f"class accuracy:  {self.class_accuracy:.4f}",
            f"mean NLL:        {self.mean_nll:.4f}",
        ]
        return "\n".join(lines)


def _conditional_log_density(spec: MixtureSpec, points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """log p(x | own class) per sample; null-labeled samples use the
    class-marginal density."""
    out = np.empty(points.shape[0])
    for c in np.unique(labels):
        mask = labels == c
        out[mask] = spec.log_density(points[mask], None if c == 0 else int(c), 0.0)
    return out


def density_floor(
    spec: MixtureSpec,
    unconditional: bool = False,
    quantile: float = DEFAULT_FLOOR_QUANTILE,
    n: int = DEFAULT_FLOOR_SAMPLES,
    seed: int = DEFAULT_FLOOR_SEED,
) -> float:
    """Log-density quantile of fresh ground-truth samples (cached per spec)."""
    key = (spec.digest(), unconditional, quantile, n, seed)
    if key not in _floor_cache:
        points, labels, _ = sample_points(spec, n, seed)
        if unconditional:
            labels = np.zeros_like(labels)
        ld = _conditional_log_density(spec, points, labels)
        _floor_cache[key] = float(np.quantile(ld, quantile))
    return _floor_cache[key]


def outlier_rate(spec: MixtureSpec, points, labels, log_density_floor: float) -> float:
    """Fraction of samples whose own-class log-density falls below the floor."""
    if not np.isfinite(log_density_floor):
        raise ValueError("log-density floor must be finite")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    ld = _conditional_log_density(spec, points, labels)
    return float(np.mean(ld < log_density_floor))


def mode_coverage(spec: MixtureSpec, points, labels, radius_sigmas: float = DEFAULT_RADIUS_SIGMAS) -> float:
    """Fraction of (class, component) pairs with at least one same-class
    sample within `radius_sigmas` Mahalanobis distance of the component.
    Null-labeled samples (unconditional batches) may cover any component."""
    if not radius_sigmas > 0:
        raise ValueError("radius_sigmas must be > 0")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    covered = 0
    total = 0
    r2 = radius_sigmas**2
    for c in spec.selected_classes:
        pts = points[(labels == c) | (labels == 0)]
        _, means, covs = spec.class_params(c)
        total += means.shape[0]
        if pts.shape[0] == 0:
            continue
        a, b, d = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
        det = a * d - b * b
        diff = pts[:, None, :] - means[None, :, :]
        dx, dy = diff[..., 0], diff[..., 1]
        maha2 = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
        covered += int(np.sum(maha2.min(axis=0) <= r2))
    return covered / total


def class_accuracy(spec: MixtureSpec, points, labels) -> float:
    """Fraction of samples whose conditional-density argmax over selected
    classes matches the prompt; ties resolve to the lower class index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    pred = classify(spec, points)
    return float(np.mean(pred == labels))


def classify(spec: MixtureSpec, points) -> np.ndarray:
    """Density-argmax class decision (uniform class prior)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    classes = np.asarray(spec.selected_classes)
    ld = np.stack([spec.log_density(points, int(c), 0.0) for c in classes], axis=1)
    return classes[np.argmax(ld, axis=1)]  # argmax takes the first max: lower index wins


def evaluate_batch(
    spec: MixtureSpec,
    points,
    labels,
    guidance_label: str = "unguided",
    radius_sigmas: float = DEFAULT_RADIUS_SIGMAS,
    log_density_floor: float | None = None,
) -> EvalReport:
    """Full metric report for one sample batch, with per-class breakdowns."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    unconditional = bool(np.all(labels == 0))
    if log_density_floor is None:
        log_density_floor = density_floor(spec, unconditional)
    ld = _conditional_log_density(spec, points, labels)
    pred = classify(spec, points)
    per_class = {}
    for c in np.unique(labels):
        mask = labels == c
        per_class[int(c)] = {
            "n": int(mask.sum()),
            "outlier_rate": float(np.mean(ld[mask] < log_density_floor)),
            "class_accuracy": float(np.mean(pred[mask] == labels[mask])),
            "mean_nll": float(-np.mean(ld[mask])),
        }
    return EvalReport(
        guidance_label=guidance_label,
        n_samples=points.shape[0],
        outlier_rate=float(np.mean(ld < log_density_floor)),
        mode_coverage=mode_coverage(spec, points, labels, radius_sigmas),
        class_accuracy=float(np.mean(pred == labels)),
        mean_nll=float(-ld.mean()),
        log_density_floor=float(log_density_floor),
        radius_sigmas=float(radius_sigmas),
        per_class=per_class,
    )


def velocity_field_mse(model_fn, oracle_fn, spec: MixtureSpec, t_list, n: int, seed=0) -> np.ndarray:
    """Monte Carlo E||model - oracle||^2 at each t over forward-noised
    ground-truth states; per-t independent substreams."""
    t_list = np.asarray(t_list, dtype=np.float64)
    out = np.empty(t_list.shape)
    for j, t in enumerate(t_list):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), j]))
        x0, labels, _ = sample_points(spec, n, rng)
        eps = rng.standard_normal((n, 2))
        x_t = (1.0 - t) * x0 + t * eps
        sq = np.empty(n)
        for c in np.unique(labels):
            mask = labels == c
            diff = model_fn(x_t[mask], float(t), int(c)) - oracle_fn(x_t[mask], float(t), int(c))
            sq[mask] = np.sum(diff**2, axis=1)
        out[j] = sq.mean()
    return out
