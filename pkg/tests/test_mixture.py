import math

import numpy as np
import pytest

from flowguide.mixture import (
    BASE_LABEL,
    Dataset,
    GaussianComponent,
    MixtureSpec,
    ToyConfig,
    build_recursive_mixture,
    preset_config,
    sample_dataset,
    sample_points,
)


def enumerate_recursion_tree(num_classes, max_depth, branch_factor, points_per_branch):
    """Independent oracle: walk the branching tree and count the class
    components one leaf at a time (no closed form)."""

    def count(depth):
        n = points_per_branch
        if depth + 1 < max_depth:
            for _ in range(branch_factor):
                n += count(depth + 1)
        return n

    return num_classes * count(0)


def test_component_invariants():
    with pytest.raises(ValueError):
        GaussianComponent(0.0, np.zeros(2), np.eye(2), 1)
    with pytest.raises(ValueError):
        GaussianComponent(1.0, np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 1)
    with pytest.raises(ValueError):
        GaussianComponent(1.0, np.zeros(2), -np.eye(2), 1)


def test_toyconfig_invariants():
    with pytest.raises(ValueError):
        ToyConfig(num_classes=0, max_depth=1, branch_factor=1)
    with pytest.raises(ValueError):
        ToyConfig(num_classes=1, max_depth=0, branch_factor=1)
    with pytest.raises(ValueError):
        ToyConfig(num_classes=1, max_depth=1, branch_factor=1, depth_decay=0.0)


def test_presets_match_published_tuples():
    a = preset_config("A")
    assert (a.num_classes, a.max_depth, a.branch_factor) == (4, 3, 2)
    b = preset_config("B")
    assert (b.num_classes, b.max_depth, b.branch_factor) == (24, 1, 2)
    c = preset_config("C")
    assert (c.num_classes, c.max_depth, c.branch_factor) == (12, 2, 2)
    with pytest.raises(ValueError):
        preset_config("D")


def test_main_branch_length_formula():
    # 12 classes -> 0.4 * (1 + 0.1 * 12) = 0.88
    cfg = ToyConfig(num_classes=12, max_depth=1, branch_factor=1)
    spec = build_recursive_mixture(cfg)
    # trunk spans base_point .. base_point + 0.88 * direction; the last trunk
    # component sits at lambda=0.75 of the final segment
    trunk = [c for c in spec.components if c.class_label == BASE_LABEL]
    alpha = math.radians(cfg.main_angle_deg)
    direction = np.array([math.cos(alpha), math.sin(alpha)])
    seg = 0.88 / 12
    expected_last = np.array(cfg.base_point) + (11 + 0.75) * seg * direction
    np.testing.assert_allclose(trunk[-1].mean, expected_last, atol=1e-12)


def test_one_leaf_per_class():
    cfg = ToyConfig(num_classes=4, max_depth=1, branch_factor=1, points_per_branch=1)
    spec = build_recursive_mixture(cfg)
    class_comps = [c for c in spec.components if c.class_label != BASE_LABEL]
    assert len(class_comps) == 4
    assert sorted(c.class_label for c in class_comps) == [1, 2, 3, 4]


@pytest.mark.parametrize("name", ["A", "B", "C"])
def test_component_count_matches_tree_enumeration(name):
    cfg = preset_config(name)
    spec = build_recursive_mixture(cfg)
    n_class = sum(1 for c in spec.components if c.class_label != BASE_LABEL)
    expected = enumerate_recursion_tree(
        cfg.num_classes, cfg.max_depth, cfg.branch_factor, cfg.points_per_branch
    )
    assert n_class == expected
    # config C closed form quoted in the docs: 12 * ppb * (1 + B) at depth 2
    if name == "C":
        assert n_class == 12 * cfg.points_per_branch * (1 + cfg.branch_factor)


def test_construction_deterministic():
    cfg = preset_config("C")
    s1 = build_recursive_mixture(cfg)
    s2 = build_recursive_mixture(cfg)
    assert s1.digest() == s2.digest()
    for c1, c2 in zip(s1.components, s2.components):
        assert np.array_equal(c1.mean, c2.mean)
        assert np.array_equal(c1.cov, c2.cov)


def test_class_weights_normalized():
    for name in ("A", "B", "C"):
        spec = build_recursive_mixture(preset_config(name))
        for c in spec.selected_classes:
            assert abs(spec.class_weights(c).sum() - 1.0) < 1e-12


def test_sampling_moments_single_gaussian():
    comp = GaussianComponent(1.0, np.zeros(2), np.eye(2), 1)
    spec = MixtureSpec([comp], num_classes=1)
    ds = sample_dataset(spec, 100_000, seed=0)
    assert np.linalg.norm(ds.points.mean(axis=0)) < 0.02
    emp_cov = np.cov(ds.points.T)
    assert np.linalg.norm(emp_cov - np.eye(2)) < 0.05


def test_uniform_class_prior_config_b():
    spec = build_recursive_mixture(preset_config("B"))
    ds = sample_dataset(spec, 100_000, seed=1)
    counts = np.bincount(ds.labels, minlength=25)[1:]
    p = 1.0 / 24
    sigma = math.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) < 4 * sigma)


def test_component_occupancy_matches_weights():
    comps = [
        GaussianComponent(0.5, np.array([0.0, 0.0]), 0.01 * np.eye(2), 1),
        GaussianComponent(0.3, np.array([5.0, 0.0]), 0.01 * np.eye(2), 1),
        GaussianComponent(0.2, np.array([0.0, 5.0]), 0.01 * np.eye(2), 1),
    ]
    spec = MixtureSpec(comps, num_classes=1)
    n = 100_000
    _, _, comp_of = sample_points(spec, n, seed=3)
    counts = np.bincount(comp_of, minlength=3)
    for k, pi in enumerate([0.5, 0.3, 0.2]):
        sigma = math.sqrt(n * pi * (1 - pi))
        assert abs(counts[k] - n * pi) < 4 * sigma


def test_log_density_standard_normal_peak():
    spec = MixtureSpec([GaussianComponent(1.0, np.zeros(2), np.eye(2), 1)], 1)
    assert abs(spec.log_density(np.zeros(2), 1, 0.0) - math.log(1 / (2 * math.pi))) < 1e-12


def test_log_density_terminal_noise_limit():
    # deviation from the standard normal is O(1 - t); the t^2 variance factor
    # alone contributes ~2(1-t) at x=0, so the bound scales with (1 - t)
    spec = MixtureSpec(
        [GaussianComponent(1.0, np.array([0.7, -0.3]), np.array([[0.5, 0.1], [0.1, 0.3]]), 1)], 1
    )
    std = MixtureSpec([GaussianComponent(1.0, np.zeros(2), np.eye(2), 1)], 1)
    for x in (np.zeros(2), np.array([1.0, 1.0]), np.array([-0.5, 2.0])):
        gap_999 = abs(spec.log_density(x, 1, 0.999) - std.log_density(x, 1, 0.0))
        gap_9999 = abs(spec.log_density(x, 1, 0.9999) - std.log_density(x, 1, 0.0))
        assert gap_999 < 8e-3
        assert gap_9999 < 8e-4


def test_log_density_rejects_bad_t():
    spec = MixtureSpec([GaussianComponent(1.0, np.zeros(2), np.eye(2), 1)], 1)
    with pytest.raises(ValueError):
        spec.log_density(np.zeros(2), 1, 1.0)
    with pytest.raises(ValueError):
        spec.log_density(np.zeros(2), 1, -0.1)


def test_noised_spec_identity():
    # density at time t equals the t=0 density of the analytically noised spec
    spec = build_recursive_mixture(preset_config("A"))
    rng = np.random.default_rng(7)
    x = rng.standard_normal((50, 2))
    for t in (0.1, 0.5, 0.9):
        noised = spec.noised(t)
        for c in (None, 1, 3):
            np.testing.assert_allclose(
                spec.log_density(x, c, t), noised.log_density(x, c, 0.0), atol=1e-12
            )


def test_density_normalization_importance_sampling():
    # oracle: integral of p(x | c) dx estimated with Gaussian importance
    # samples matched to the noised mixture's first two moments
    spec = build_recursive_mixture(preset_config("B"))
    t = 0.5
    rng = np.random.default_rng(11)
    pi, means, covs = spec.cond_params(None)
    means_t = (1 - t) * means
    mean = pi @ means_t
    spread = np.einsum("k,kij->ij", pi, (1 - t) ** 2 * covs + t**2 * np.eye(2))
    spread += np.einsum("k,ki,kj->ij", pi, means_t - mean, means_t - mean)
    q_cov = 2.0 * spread + 0.1 * np.eye(2)
    chol = np.linalg.cholesky(q_cov)
    n = 1_000_000
    z = rng.standard_normal((n, 2))
    xs = mean + z @ chol.T
    log_q = (
        -np.log(2 * np.pi)
        - 0.5 * np.log(np.linalg.det(q_cov))
        - 0.5 * np.sum(z * z, axis=1)
    )
    log_p = spec.log_density(xs, None, t)
    ratio = np.exp(log_p - log_q)
    est = ratio.mean()
    se = ratio.std(ddof=1) / math.sqrt(n)
    assert abs(est - 1.0) < 3 * se


def test_sampling_density_consistency():
    # mean log-density of fresh samples within 3 SE of an independent batch
    spec = build_recursive_mixture(preset_config("C"))
    pts1, lab1, _ = sample_points(spec, 10_000, seed=21)
    pts2, lab2, _ = sample_points(spec, 10_000, seed=22)

    def mean_ld(pts, lab):
        vals = np.empty(len(lab))
        for c in np.unique(lab):
            m = lab == c
            vals[m] = spec.log_density(pts[m], int(c), 0.0)
        return vals

    v1, v2 = mean_ld(pts1, lab1), mean_ld(pts2, lab2)
    se = math.hypot(v1.std(ddof=1) / 100, v2.std(ddof=1) / 100)
    assert abs(v1.mean() - v2.mean()) < 3 * se


def test_spec_round_trip():
    spec = build_recursive_mixture(preset_config("A"))
    again = MixtureSpec.from_text(spec.to_text())
    assert again.digest() == spec.digest()
    assert again.num_classes == spec.num_classes
    assert again.selected_classes == spec.selected_classes


def test_dataset_round_trip_and_validation():
    spec = build_recursive_mixture(preset_config("B"))
    ds = sample_dataset(spec, 500, seed=5)
    again = Dataset.from_text(ds.to_text())
    assert np.array_equal(again.points, ds.points)
    assert np.array_equal(again.labels, ds.labels)
    assert again.source_spec_hash == spec.digest()
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), np.zeros(0))


def test_dataset_labels_within_selected_classes():
    spec = build_recursive_mixture(preset_config("C"))
    ds = sample_dataset(spec, 2_000, seed=9)
    assert set(np.unique(ds.labels)) <= set(spec.selected_classes)
