import math
import unittest

import numpy as np
import pytest

from conftest import build_tabular, small_space
from src.exceptions import AnalysisError, CorrelationUndefinedError
from src.schemas import ToyDataSpec
from src.services.analysis import (
    Ecdf,
    correlation_report,
    criterion_value,
    error_reduction,
    error_reduction_table,
    geomean_reduction,
    method_label,
    pareto_frontier,
    per_st_config_reduction_cdf,
    pearson,
    percent_reduction,
    rat_ae_grid,
    time_reduction_cdf,
)
from src.services.space import enumerate_space
from src.services.toymodel import make_toy_dataset
from src.services.training import grid_sweep

EPS = 8 / 255

# std_error per (st_lr, at_lr); the untied pair (0.1, 0.01) is the overall best
LR_ERRORS = {(0.1, 0.1): 0.3, (0.01, 0.01): 0.25, (0.1, 0.01): 0.2, (0.01, 0.1): 0.4}


def lr_table(config, fidelity, epsilon, seed):
    std_error = LR_ERRORS[(config.st_lr, config.at_lr)]
    return std_error, std_error + 0.1, 1.0


def lr_dataset():
    space = small_space(rat_pct=[50], ae_pct=[100], epochs=[1], attack_iters=[1])
    return build_tabular(space, outcome=lr_table)


class TestErrorReduction(unittest.TestCase):

    def test_criteria(self):
        self.assertEqual(criterion_value(0.2, 0.4, "Error"), 0.2)
        self.assertEqual(criterion_value(0.2, 0.4, "AdvError"), 0.4)
        self.assertAlmostEqual(criterion_value(0.2, 0.4, "MeanError"), 0.3)
        with self.assertRaises(AnalysisError):
            criterion_value(0.2, 0.4, "Median")

    def test_percent_reduction(self):
        self.assertAlmostEqual(percent_reduction(0.25, 0.2), 20.0)
        self.assertEqual(percent_reduction(0.0, 0.0), 0.0)

    def test_tied_against_untied(self):
        ds = lr_dataset()
        row = error_reduction(ds, "Error", 50, EPS)
        self.assertAlmostEqual(row.same, 0.25)
        self.assertAlmostEqual(row.diff, 0.2)
        self.assertAlmostEqual(row.reduction, 20.0)
        self.assertAlmostEqual(error_reduction(ds, "AdvError", None, EPS).reduction, 100 * 0.05 / 0.35)
        self.assertAlmostEqual(error_reduction(ds, "MeanError", 50, EPS).reduction, 100 * 0.05 / 0.3)
        with self.assertRaises(AnalysisError):
            error_reduction(ds, "Error", 70, EPS)

    def test_table_and_geomean(self):
        rows, summary = error_reduction_table(lr_dataset(), rat_values=[50])
        self.assertEqual([row.criterion for row in rows], ["Error", "AdvError", "MeanError"])
        for row in rows:
            self.assertAlmostEqual(summary[row.criterion].value, row.reduction)
            self.assertEqual(summary[row.criterion].used, 1)

    def test_geomean_excludes_non_positive(self):
        result = geomean_reduction([10.0, 40.0, -5.0, 0.0])
        self.assertAlmostEqual(result.value, 20.0)
        self.assertEqual((result.used, result.excluded), (2, 2))
        with self.assertRaises(AnalysisError):
            geomean_reduction([-1.0, 0.0])

    def test_per_st_config_cdf(self):
        ecdf = per_st_config_reduction_cdf(lr_dataset(), "Error", EPS, rat_values=[50])
        np.testing.assert_allclose(ecdf.values, [0.0, 100 / 3])
        self.assertAlmostEqual(ecdf.median, 50 / 3)
        self.assertAlmostEqual(ecdf.maximum, 100 / 3)


class TestEcdf(unittest.TestCase):

    def test_steps(self):
        ecdf = Ecdf.from_samples([3.0, 1.0, 2.0])
        self.assertAlmostEqual(float(ecdf(2.0)), 2 / 3)
        self.assertEqual(float(ecdf(0.5)), 0.0)
        self.assertEqual(float(ecdf(10.0)), 1.0)
        xs, ys = ecdf.steps()
        np.testing.assert_array_equal(xs, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(ys, [1 / 3, 2 / 3, 1.0])
        with self.assertRaises(AnalysisError):
            Ecdf.from_samples([])


class TestCorrelation(unittest.TestCase):

    def test_pearson(self):
        self.assertAlmostEqual(pearson([1, 2, 3], [2, 4, 7]), 0.99340, places=5)
        self.assertAlmostEqual(pearson([1, 2, 3], [3, 2, 1]), -1.0)
        with self.assertRaises(CorrelationUndefinedError):
            pearson([1, 1, 1], [1, 2, 3])
        with self.assertRaises(CorrelationUndefinedError):
            pearson([1], [2])

    def test_report_pairs_configs_at_max_epochs(self):
        ds = build_tabular(small_space(attack_iters=[1, 5, 20]), seeds=(0, 1))
        rows = correlation_report(ds, EPS, "adv_error", cheap_iters=(1, 5))
        self.assertEqual([row.cheap_iters for row in rows], [1, 5])
        for row in rows:
            self.assertEqual(len(row.cheap), 10)
            self.assertAlmostEqual(row.r, 1.0)
            self.assertTrue(all(c > r for c, r in zip(row.cheap, row.reference)))

    def test_report_needs_reference(self):
        with self.assertRaises(AnalysisError):
            correlation_report(build_tabular(small_space()), EPS, "std_error")


class TestTimeReduction(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.report = time_reduction_cdf(build_tabular(small_space(attack_iters=[1, 5, 20])))

    def test_labels(self):
        self.assertEqual(set(self.report), {"FGSM", "PGD5", "PGD10", "ST"})
        self.assertEqual(method_label(1), "FGSM")
        self.assertEqual(method_label(10), "PGD10")

    def test_fgsm_and_st_savings(self):
        # t = 0.01 * epochs * (1 + rat * ae * k), independent of epochs once normalized
        fgsm = self.report["FGSM"]
        self.assertEqual(fgsm.matched, 8 * 2)
        expected = sorted(2 * 4 * [100 * (11 - 1.5) / 11] + 2 * 4 * [100 * (6 - 1.25) / 6])
        np.testing.assert_allclose(fgsm.ecdf.values, expected)
        st = self.report["ST"]
        self.assertEqual(st.skipped, 0)
        np.testing.assert_allclose(np.unique(np.round(st.ecdf.values, 9)),
                                   np.round(sorted([100 * 5 / 6, 100 * 10 / 11]), 9))

    def test_missing_counterparts_are_counted(self):
        pgd10 = self.report["PGD10"]
        self.assertIsNone(pgd10.ecdf)
        self.assertEqual(pgd10.skipped, 16)
        self.assertTrue(np.all(self.report["PGD5"].ecdf.values > 0))


class TestPareto(unittest.TestCase):

    def test_small_example(self):
        points = [(1, 3), (2, 2), (3, 1), (2, 3), (1, 3)]
        self.assertEqual(pareto_frontier(points), [0, 1, 2, 4])
        self.assertEqual(pareto_frontier(points, labels="abcde"), ["a", "b", "c", "e"])
        with self.assertRaises(AnalysisError):
            pareto_frontier([])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            points = [tuple(p) for p in rng.integers(0, 6, size=(int(rng.integers(1, 30)), 2))]
            brute = [i for i, (x, y) in enumerate(points)
                     if not any(a <= x and b <= y and (a < x or b < y) for a, b in points)]
            self.assertEqual(pareto_frontier(points), brute)


def test_rat_ae_grid(tabular):
    grid = rat_ae_grid(tabular, EPS)
    assert [(c.rat_pct, c.ae_pct) for c in grid.cells] == [(50, 50), (50, 100)]
    assert grid.frontier == ((50, 100),)
    assert grid.mixed_fraction == 0.0
    assert grid.cells[1].std_error < grid.cells[0].std_error


def test_rat_ae_grid_needs_adversarial_configs():
    ds = build_tabular(small_space(rat_pct=[0]))
    with pytest.raises(AnalysisError):
        rat_ae_grid(ds, EPS)


def random_outcome(rng, space):
    table = {}
    for config in enumerate_space(space):
        std_error = float(rng.uniform(0.0, 0.5))
        table[config.astuple()] = (std_error, std_error + float(rng.uniform(0.0, 0.5)))

    def outcome(config, fidelity, epsilon, seed):
        return (*table[config.astuple()], 1.0)

    return table, outcome


class TestRandomizedOracles(unittest.TestCase):

    TRIALS = 100

    def test_error_reduction_and_per_st_cdf(self):
        rng = np.random.default_rng(21)
        space = small_space(rat_pct=[30, 50], ae_pct=[100], epochs=[1], attack_iters=[1])
        configs = enumerate_space(space)
        for _ in range(self.TRIALS):
            table, outcome = random_outcome(rng, space)
            ds = build_tabular(space, outcome=outcome)
            for criterion in ("Error", "AdvError", "MeanError"):
                def value(config):
                    return criterion_value(*table[config.astuple()], criterion)

                for rat in (None, 30, 50):
                    pool = [c for c in configs if rat is None or c.rat_pct == rat]
                    same = min(value(c) for c in pool if c.tied)
                    diff = min(value(c) for c in pool)
                    row = error_reduction(ds, criterion, rat, EPS)
                    self.assertAlmostEqual(row.same, same)
                    self.assertAlmostEqual(row.diff, diff)
                    self.assertAlmostEqual(row.reduction, 100 * (same - diff) / same)

                expected = []
                for st in sorted({c.st_hps() for c in configs}):
                    group = [c for c in configs if c.st_hps() == st]
                    same = min(value(c) for c in group if c.tied)
                    expected.append(100 * (same - min(value(c) for c in group)) / same)
                ecdf = per_st_config_reduction_cdf(ds, criterion, EPS, rat_values=[30, 50])
                np.testing.assert_allclose(ecdf.values, sorted(expected))

    def test_pearson(self):
        rng = np.random.default_rng(22)
        for _ in range(self.TRIALS):
            n = int(rng.integers(3, 30))
            xs = rng.normal(size=n)
            ys = float(rng.normal()) * xs + rng.normal(size=n)
            dx, dy = xs - xs.mean(), ys - ys.mean()
            expected = float(np.sum(dx * dy) / np.sqrt(np.sum(dx ** 2) * np.sum(dy ** 2)))
            self.assertAlmostEqual(pearson(xs, ys), expected, places=9)

    def test_ecdf(self):
        rng = np.random.default_rng(23)
        for _ in range(self.TRIALS):
            samples = rng.integers(-5, 6, size=int(rng.integers(1, 25))).astype(float)
            ecdf = Ecdf.from_samples(samples)
            for x in np.arange(-6.0, 7.0, 0.5):
                self.assertAlmostEqual(float(ecdf(x)), sum(v <= x for v in samples) / len(samples))
            self.assertEqual(ecdf.maximum, max(samples))
            self.assertAlmostEqual(ecdf.median, float(np.median(samples)))

    def test_geomean(self):
        rng = np.random.default_rng(24)
        for _ in range(self.TRIALS):
            values = list(rng.uniform(-50, 100, size=int(rng.integers(1, 20)))) + [float(rng.uniform(1, 90))]
            positive = [v for v in values if v > 0]
            result = geomean_reduction(values)
            self.assertAlmostEqual(result.value, math.exp(sum(math.log(v) for v in positive) / len(positive)))
            self.assertEqual((result.used, result.excluded), (len(positive), len(values) - len(positive)))


@pytest.mark.slow
def test_cheap_attacks_track_reference_on_toy_sweep():
    space = small_space(st_lr=[0.3, 0.1, 0.03, 0.01], st_momentum=[0.0, 0.9], st_batch=[16],
                        at_lr=[0.3, 0.1, 0.03, 0.01], at_momentum=[0.0, 0.9], at_batch=[16],
                        pgd_alpha=[0.01, 0.02], rat_pct=[50, 70], ae_pct=[100], epochs=[2],
                        attack_iters=[1, 5, 10, 20])
    assert len(enumerate_space(space)) >= 256
    data = make_toy_dataset(ToyDataSpec(n_train=200, n_test=100, seed=0))
    ds = grid_sweep(space, data, seeds=[0, 1, 2], cost="simulated")
    rows = {row.cheap_iters: row for row in correlation_report(ds, EPS, "adv_error", cheap_iters=(1, 5, 10))}
    assert len(rows[5].cheap) >= 256
    assert rows[5].r >= 0.5
    assert rows[10].r >= 0.5
    assert -1.0 <= rows[1].r <= 1.0
