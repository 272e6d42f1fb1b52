import math

import numpy as np
import pytest

from quantmcu.actstats import GaussianFit, OutlierModel, fit_gaussian
from quantmcu.errors import EmptyPatch
from quantmcu.netgraph import LayerSpec, NetworkSpec, split_patches
from quantmcu.refengine import calibrate, calibration_from_arrays, synthetic_weights
from quantmcu.vdpc import (
    PatchLabel,
    Policy,
    assign_policies,
    classify_all,
    classify_patch,
)


def model(phi, mu=0.0, sigma=1.0):
    return OutlierModel(GaussianFit(mu, sigma, 100), phi)


def brute_force_count(values, mu, sigma, phi):
    """Independent per-value normalized-density decision."""
    count = 0
    for v in values:
        density_ratio = math.exp(-((float(v) - mu) ** 2) / (2 * sigma * sigma))
        if density_ratio < 1.0 - phi:
            count += 1
    return count


class TestClassifyPatch:
    def test_all_at_mean(self):
        pc = classify_patch([0.0, 0.0, 0.0], model(0.5))
        assert pc.label is PatchLabel.NON_OUTLIER
        assert pc.outlier_count == 0

    def test_single_spike(self):
        pc = classify_patch([0.1, -0.3, 3.0], model(0.96))
        assert pc.label is PatchLabel.OUTLIER
        assert pc.outlier_count == 1
        assert pc.fraction_outlier_values == pytest.approx(1 / 3)

    def test_high_phi_clears_patch(self):
        pc = classify_patch([0.1, -0.3, 3.0], model(0.999))
        assert pc.label is PatchLabel.NON_OUTLIER

    def test_empty_patch(self):
        with pytest.raises(EmptyPatch):
            classify_patch([], model(0.5))

    def test_outlier_label_iff_count_positive(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            values = rng.normal(0, 1, size=int(rng.integers(1, 40)))
            pc = classify_patch(values, model(float(rng.uniform(0, 0.99))))
            assert (pc.label is PatchLabel.OUTLIER) == (pc.outlier_count >= 1)

    def test_matches_value_by_value_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            mu = float(rng.normal(0, 2))
            sigma = float(rng.uniform(0.2, 3))
            phi = float(rng.uniform(0.0, 0.995))
            values = rng.normal(mu, 2 * sigma, size=60)
            pc = classify_patch(values, model(phi, mu, sigma))
            assert pc.outlier_count == brute_force_count(values, mu, sigma, phi)

    def test_monotone_in_phi(self):
        rng = np.random.default_rng(9)
        values = rng.normal(0, 1, size=100)
        labels = [classify_patch(values, model(phi)).outlier_count
                  for phi in (0.0, 0.3, 0.6, 0.9, 0.96, 0.99)]
        assert labels == sorted(labels, reverse=True)


def tile_pools(inputs, grid=(2, 2)):
    """Calibration pools for a conv net split at depth 0 into ``grid`` tiles."""
    h, w, c = inputs[0].shape
    net = NetworkSpec(
        name="t", input_shape=(h, w, c),
        layers=(LayerSpec("conv", 3, 1, 1, 4),),
        patch_grid=grid, patch_depth=0,
    )
    branches = split_patches(net)
    cal = calibration_from_arrays(inputs)
    return calibrate(net, synthetic_weights(net, 0), cal, branches)


class TestClassifyAll:
    def test_single_branch_matches_classify_patch(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (8, 8, 1)).astype(np.float32)
        pools = tile_pools([x], grid=(1, 1))
        om = model(0.9)
        classes, table = classify_all(pools, om)
        assert len(classes) == 1
        assert classes[0].label is classify_patch(x.ravel(), om).label
        assert table == [[classes[0].label]]

    def test_crafted_spike_marks_one_patch(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.4, 0.6, (8, 8, 1)).astype(np.float32)
        pools = tile_pools([x])
        fit = fit_gaussian(pools.full_pool(0))
        om = OutlierModel(fit, 0.96)
        # place a value beyond the closed-form threshold in tile (0,0) only
        x[1, 1, 0] = fit.mu + 1.5 * om.threshold()
        pools = tile_pools([x])
        fit = fit_gaussian(pools.full_pool(0))
        om = OutlierModel(fit, 0.96)
        assert abs(x[1, 1, 0] - fit.mu) > om.threshold()
        classes, _ = classify_all(pools, om)
        labels = {pc.branch_id: pc.label for pc in classes}
        assert labels[(0, 0)] is PatchLabel.OUTLIER
        assert all(lb is PatchLabel.NON_OUTLIER
                   for pid, lb in labels.items() if pid != (0, 0))

    def test_degenerate_sigma_fallback(self):
        x = np.zeros((8, 8, 1), dtype=np.float32)
        pools = tile_pools([x])
        classes, table = classify_all(pools, om=None)
        assert all(pc.label is PatchLabel.NON_OUTLIER for pc in classes)
        assert all(lb is PatchLabel.NON_OUTLIER for row in table for lb in row)

    def test_majority_vote_with_outlier_tiebreak(self):
        rng = np.random.default_rng(4)
        base = [rng.uniform(0.4, 0.6, (8, 8, 1)).astype(np.float32)
                for _ in range(2)]
        pools = tile_pools(base)
        fit = fit_gaussian(pools.full_pool(0))
        om = OutlierModel(fit, 0.96)
        # spike tile (1, 1) in exactly one of two samples: a tie, which the
        # accuracy-preserving direction resolves to the outlier class
        base[0][6, 6, 0] = fit.mu + 2.0 * om.threshold()
        pools = tile_pools(base)
        fit = fit_gaussian(pools.full_pool(0))
        classes, table = classify_all(pools, OutlierModel(fit, 0.96))
        labels = {pc.branch_id: pc.label for pc in classes}
        assert labels[(1, 1)] is PatchLabel.OUTLIER
        per_sample = [row[3] for row in table]
        assert per_sample.count(PatchLabel.OUTLIER) == 1


class TestAssignPolicies:
    def test_mapping(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0.4, 0.6, (8, 8, 1)).astype(np.float32)
        pools = tile_pools([x])
        fit = fit_gaussian(pools.full_pool(0))
        om = OutlierModel(fit, 0.96)
        x[0, 0, 0] = fit.mu + 2.0 * om.threshold()
        pools = tile_pools([x])
        classes, _ = classify_all(pools, OutlierModel(fit_gaussian(pools.full_pool(0)), 0.96))
        policies = assign_policies(classes)
        assert len(policies) == len(classes)  # every branch exactly one policy
        for pc, bp in zip(classes, policies):
            assert bp.branch_id == pc.branch_id
            expected = (Policy.FIXED8 if pc.label is PatchLabel.OUTLIER
                        else Policy.MIXED_PRECISION)
            assert bp.policy is expected
