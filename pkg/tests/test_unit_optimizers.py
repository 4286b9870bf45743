import math
import unittest
from fractions import Fraction

import numpy as np
import pytest

from conftest import bowl_errors, small_space
from src.exceptions import ConfigurationError, FitError
from src.schemas import FidelityPoint, OptimizerSpec
from src.services import surrogate
from src.services.optimizers import (
    CostModel,
    Objective,
    TunerState,
    bo_ei,
    fantasy_normals,
    hyperband,
    hyperband_schedule,
    knowledge_gradient,
    mf_costaware,
    random_search,
    run_optimizer,
    snap_level,
)
from src.services.space import FidelityGrid, enumerate_space

EPS = 8 / 255


def bowl(config, fidelity):
    return bowl_errors(config, fidelity, EPS, 0)


def constant(config, fidelity):
    return 0.2, 0.3, 1.0


def one_dim_space(n_lr):
    return small_space(st_lr=list(np.logspace(-3, 0, n_lr)), at_lr=[0.1], rat_pct=[50], ae_pct=[100])


class TestObjective(unittest.TestCase):

    def test_weighting(self):
        objective = Objective(lambda c, f: (0.2, 0.6, 3.0), alpha_weight=0.25)
        self.assertAlmostEqual(objective.score(0.2, 0.6), 0.5)
        value, std_error, adv_error, cost = objective(None, None)
        self.assertAlmostEqual(value, 0.5)
        self.assertEqual((std_error, adv_error, cost), (0.2, 0.6, 3.0))
        with self.assertRaises(ConfigurationError):
            Objective(constant, alpha_weight=1.5)


class TestTunerState(unittest.TestCase):

    def setUp(self):
        self.space = small_space()
        self.grid = FidelityGrid.from_space(self.space)
        self.configs = enumerate_space(self.space)
        self.state = TunerState(label="t", seed=0, budget=3.0, grid=self.grid)

    def test_incumbent_only_from_full_fidelity(self):
        values = iter([(0.1, 0.1, 1.0), (0.3, 0.3, 1.0), (0.2, 0.2, 1.0)])
        objective = Objective(lambda c, f: next(values))
        self.state.observe(objective, self.configs[0], self.grid.cheapest)
        self.assertIsNone(self.state.incumbent)
        self.state.recommend_best_observed()
        self.assertEqual(self.state.recommendations[-1], (1.0, self.configs[0]))
        self.state.observe(objective, self.configs[1], self.grid.full)
        self.state.observe(objective, self.configs[2], self.grid.full)
        self.assertEqual(self.state.incumbent.config, self.configs[2])
        self.assertEqual([e.config for e in self.state.incumbent_trace], [self.configs[1], self.configs[2]])
        self.assertFalse(self.state.has_budget)
        self.assertEqual(self.state.total_cost, 3.0)

    def test_budget_tolerates_rounding(self):
        self.state.elapsed = 0.1 + 0.2 + 2.7
        self.assertFalse(self.state.has_budget)


class TestRandomSearch(unittest.TestCase):

    def test_seeded_order_without_replacement(self):
        space = small_space()
        objective = Objective(bowl)
        first = random_search(space, objective, budget=0.3, seed=7)
        second = random_search(space, objective, budget=0.3, seed=7)
        configs = [e.config for e in first.history]
        self.assertEqual(configs, [e.config for e in second.history])
        self.assertEqual(len(set(configs)), len(configs))
        self.assertTrue(all(first.grid.is_full(e.fidelity) for e in first.history))
        before_last = first.history[-2].elapsed if len(first.history) > 1 else 0.0
        self.assertLess(before_last, 0.3)

    def test_exhaustion(self):
        space = small_space()
        exact = random_search(space, Objective(constant), budget=10.0, seed=0)
        self.assertEqual(len(exact.history), 10)
        self.assertFalse(exact.exhausted)
        spare = random_search(space, Objective(constant), budget=10.5, seed=0)
        self.assertEqual(len(spare.history), 10)
        self.assertTrue(spare.exhausted)

    def test_rejects_non_positive_budget(self):
        with self.assertRaises(ConfigurationError):
            random_search(small_space(), Objective(constant), budget=0.0, seed=0)


class TestBayesianOptimization(unittest.TestCase):

    def test_initial_design_matches_random_order(self):
        space = small_space()
        objective = Objective(bowl)
        bo = bo_ei(space, objective, budget=1.0, seed=3, init_design_size=4)
        rs = random_search(space, objective, budget=1.0, seed=3)
        self.assertEqual([e.config for e in bo.history[:4]], [e.config for e in rs.history[:4]])
        configs = [e.config for e in bo.history]
        self.assertEqual(len(set(configs)), len(configs))

    def test_finds_bowl_minimum(self):
        space = one_dim_space(31)
        objective = Objective(bowl)
        full = FidelityGrid.from_space(space).full
        best = min(objective(c, full)[0] for c in enumerate_space(space))
        cost = bowl(enumerate_space(space)[0], full)[2]
        state = bo_ei(space, objective, budget=15 * cost, seed=1)
        self.assertLessEqual(len(state.history), 16)
        self.assertLessEqual(state.incumbent.value, best + 0.02)

    def test_fit_failure_falls_back_to_random_order(self):
        space = small_space()

        def broken(*args, **kwargs):
            raise FitError("singular")

        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(surrogate, "fit", broken)
            bo = bo_ei(space, Objective(bowl), budget=0.3, seed=5)
        rs = random_search(space, Objective(bowl), budget=0.3, seed=5)
        self.assertEqual([e.config for e in bo.history], [e.config for e in rs.history])
        self.assertGreater(bo.fit_failures, 0)

    def test_exhausts_small_space(self):
        state = bo_ei(small_space(), Objective(constant), budget=100.0, seed=0)
        self.assertTrue(state.exhausted)
        self.assertEqual(len(state.history), 10)


class TestHyperBand(unittest.TestCase):

    def test_schedule_tables(self):
        table = [[(n, r) for n, r in b.rungs] for b in hyperband_schedule(9, 3)]
        self.assertEqual(table, [[(9, 1.0), (3, 3.0), (1, 9.0)], [(5, 3.0), (1, 9.0)], [(3, 9.0)]])
        table = [[n for n, _ in b.rungs] for b in hyperband_schedule(16, 2)]
        self.assertEqual(table, [[16, 8, 4, 2, 1], [10, 5, 2, 1], [7, 3, 1], [5, 2], [5]])

    def test_schedule_properties(self):
        for R in (8, 16, 32):
            for eta in (2, 3, 4):
                schedule = hyperband_schedule(R, eta)
                s_max = max(s for s in range(8) if eta ** s <= R)
                self.assertEqual([b.s for b in schedule], list(range(s_max, -1, -1)))
                for bracket in schedule:
                    s = bracket.s
                    self.assertEqual(bracket.n, math.ceil(Fraction((s_max + 1) * eta ** s, s + 1)))
                    self.assertTrue(math.isclose(bracket.r, R / eta ** s))
                    self.assertEqual(len(bracket.rungs), s + 1)
                    self.assertTrue(math.isclose(bracket.rungs[-1][1], R))
                    self.assertGreaterEqual(bracket.rungs[-1][0], 1)
                    spent = sum(n_i * r_i for n_i, r_i in bracket.rungs)
                    self.assertLessEqual(spent, (s_max + 1) * R + 1e-9)
                    for (n_a, r_a), (n_b, r_b) in zip(bracket.rungs, bracket.rungs[1:]):
                        self.assertEqual(n_b, n_a // eta)
                        self.assertTrue(math.isclose(r_b, r_a * eta))
        with self.assertRaises(ConfigurationError):
            hyperband_schedule(16, 1)

    def test_bracket_starts_for_eta_four(self):
        starts = [(b.n, b.r) for b in hyperband_schedule(16, 4)]
        self.assertEqual(starts, [(16, 1.0), (6, 4.0), (3, 16.0)])

    def test_free_evaluations_end_the_run(self):
        state = hyperband(small_space(), Objective(lambda config, fidelity: (0.2, 0.3, 0.0)), budget=1.0, seed=0)
        self.assertTrue(state.exhausted)
        self.assertEqual(state.elapsed, 0.0)
        self.assertGreater(len(state.history), 0)

    def test_snap_level(self):
        levels = [1, 2, 4, 8, 16]
        self.assertEqual(snap_level(3, levels), 2)
        self.assertEqual(snap_level(5.3, levels), 4)
        self.assertEqual(snap_level(16 / 9, levels), 2)
        self.assertEqual(snap_level(40, levels), 16)

    def test_first_bracket_rungs(self):
        space = small_space(st_lr=list(np.logspace(-3, 0, 16)), at_lr=[0.1], rat_pct=[50], ae_pct=[100],
                            epochs=[1, 2, 4, 8, 16])
        state = hyperband(space, Objective(constant), budget=31.0, seed=0)
        epochs = [e.fidelity.epochs for e in state.history]
        self.assertEqual([epochs.count(level) for level in (1, 2, 4, 8, 16)], [16, 8, 4, 2, 1])
        self.assertTrue(all(e.fidelity.attack_iters == 2 for e in state.history))
        first_rung = [e.config for e in state.history if e.fidelity.epochs == 1]
        self.assertEqual(len(set(first_rung)), 16)
        second_rung = [e.config for e in state.history if e.fidelity.epochs == 2]
        self.assertEqual(second_rung, first_rung[:8])

    def test_promotes_best(self):
        state = hyperband(small_space(), Objective(bowl), budget=0.5, seed=2)
        first = state.history[:2]
        self.assertEqual([e.fidelity.epochs for e in state.history[:3]], [1, 1, 2])
        self.assertEqual(state.history[2].config, min(first, key=lambda e: e.value).config)

    def test_resource_must_match_grid(self):
        with self.assertRaises(ConfigurationError):
            hyperband(small_space(), Objective(constant), budget=5.0, seed=0, R=4)


class TestCostModel(unittest.TestCase):

    def setUp(self):
        self.config = enumerate_space(small_space(rat_pct=[50], ae_pct=[100]))[0]

    def test_prior(self):
        model = CostModel(c0=1.0)
        self.assertAlmostEqual(model.prior(self.config, FidelityPoint(epochs=4, attack_iters=10)), 4 * (1 + 5))
        self.assertAlmostEqual(model.predict(self.config, FidelityPoint(epochs=1, attack_iters=1)), 1.5)

    def test_scaling_per_level_then_global(self):
        model = CostModel(c0=1.0)
        cheap = FidelityPoint(epochs=1, attack_iters=1)
        full = FidelityPoint(epochs=2, attack_iters=2)
        model.observe(self.config, cheap, 0.15)
        self.assertAlmostEqual(model.predict(self.config, cheap), 0.15)
        self.assertAlmostEqual(model.predict(self.config, full), 0.1 * 2 * 2)
        model.observe(self.config, full, 4.0)
        self.assertAlmostEqual(model.predict(self.config, full), 4.0)


class TestKnowledgeGradient(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.x = rng.uniform(size=(8, 2))
        self.model = surrogate.fit(self.x, np.sin(3 * self.x[:, 0]) + self.x[:, 1])
        self.discretization = rng.uniform(size=(20, 2))
        self.proposals = rng.uniform(size=(6, 2))

    def test_antithetic_normals(self):
        normals = fantasy_normals(3, 32)
        self.assertEqual(len(normals), 32)
        np.testing.assert_array_equal(normals[:16], -normals[16:])
        np.testing.assert_array_equal(normals, fantasy_normals(3, 32))
        self.assertEqual(len(fantasy_normals(3, 5)), 5)

    def test_non_negative(self):
        kg = knowledge_gradient(self.model, self.discretization, self.proposals, fantasy_normals(0, 32))
        self.assertEqual(kg.shape, (6,))
        self.assertTrue(np.all(kg >= 0))

    def test_zero_without_correlation(self):
        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(surrogate, "posterior_cross_covariance", lambda model, a, b: np.zeros((len(a), len(b))))
            kg = knowledge_gradient(self.model, self.discretization, self.proposals, fantasy_normals(0, 32))
        np.testing.assert_array_equal(kg, np.zeros(6))


class TestMultiFidelity(unittest.TestCase):

    def test_design_at_cheapest_level_and_reproducible(self):
        space = small_space()
        objective = Objective(bowl)
        first = mf_costaware(space, objective, ("epochs", "attack_iters"), budget=0.3, seed=4, init_design_size=3)
        second = mf_costaware(space, objective, ("epochs", "attack_iters"), budget=0.3, seed=4, init_design_size=3)
        cheapest = first.grid.cheapest
        self.assertTrue(all(e.fidelity == cheapest for e in first.history[:3]))
        self.assertEqual([(e.config, e.fidelity) for e in first.history],
                         [(e.config, e.fidelity) for e in second.history])
        self.assertTrue(first.recommendations)
        pairs = [(e.config, e.fidelity) for e in first.history]
        self.assertEqual(len(set(pairs)), len(pairs))

    def test_unselected_dimension_stays_at_maximum(self):
        state = mf_costaware(small_space(), Objective(bowl), ("epochs",), budget=0.3, seed=1)
        self.assertTrue(all(e.fidelity.attack_iters == 2 for e in state.history))
        self.assertEqual(state.history[0].fidelity, FidelityPoint(epochs=1, attack_iters=2))

    def test_zero_knowledge_gradient_takes_cheapest(self):
        space = small_space()
        with pytest.MonkeyPatch.context() as mp:
            mp.setattr("src.services.optimizers.knowledge_gradient",
                       lambda model, a, proposals, normals: np.zeros(len(proposals)))
            state = mf_costaware(space, Objective(bowl), ("epochs", "attack_iters"), budget=0.1, seed=0)
        self.assertTrue(all(e.fidelity == state.grid.cheapest for e in state.history))

    def test_exhausts_small_space(self):
        state = mf_costaware(small_space(), Objective(bowl), ("epochs", "attack_iters"), budget=100.0, seed=0)
        self.assertTrue(state.exhausted)
        self.assertEqual(len(state.history), 10 * 4)


@pytest.mark.parametrize("name", ["random", "bo_ei", "hyperband", "mf"])
def test_run_optimizer_dispatch(name):
    spec = OptimizerSpec(name=name, label=f"opt-{name}", fidelity_dims=("epochs",) if name == "mf" else ())
    state = run_optimizer(spec, small_space(), Objective(bowl), budget=0.2, seed=0)
    assert state.label == f"opt-{name}"
    assert state.history
    assert state.elapsed >= 0.2 or state.exhausted
