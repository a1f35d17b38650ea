import numpy as np
import pytest

from shadetree.cma import OptimizerConfig, cma_minimize


def sphere(x):
    return float(np.sum(x * x))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


class TestConvergence:
    def test_sphere_8d(self):
        result = cma_minimize(sphere, 8,
                              OptimizerConfig(max_evals=5000, seed=1, sigma0=0.5),
                              x0=np.full(8, 1.0))
        assert result.f < 1e-10
        assert result.evals <= 5000

    def test_rosenbrock_4d(self):
        result = cma_minimize(rosenbrock, 4,
                              OptimizerConfig(max_evals=20000, seed=2, sigma0=0.5),
                              x0=np.zeros(4))
        assert result.f < 1e-6
        assert result.evals <= 20000

    def test_constant_objective(self):
        result = cma_minimize(lambda x: 7.25, 3,
                              OptimizerConfig(max_evals=400, seed=3))
        assert result.f == 7.25
        assert result.x.shape == (3,)


class TestContracts:
    def test_deterministic_per_seed(self):
        cfg = OptimizerConfig(max_evals=3000, seed=11, sigma0=0.4, restarts=2)
        r1 = cma_minimize(rosenbrock, 3, cfg, x0=np.zeros(3))
        r2 = cma_minimize(rosenbrock, 3, cfg, x0=np.zeros(3))
        assert r1.f == r2.f
        assert np.array_equal(r1.x, r2.x)
        assert r1.evals == r2.evals

    def test_best_ever_bookkeeping(self):
        seen = []

        def traced(x):
            value = sphere(x)
            seen.append(value)
            return value

        result = cma_minimize(traced, 5, OptimizerConfig(max_evals=800, seed=4),
                              x0=np.full(5, 2.0))
        assert result.f <= min(seen)

    def test_budget_respected_with_restarts(self):
        calls = []

        def counting(x):
            calls.append(1)
            return rosenbrock(x)

        cfg = OptimizerConfig(max_evals=1200, seed=5, restarts=3, refine_evals=50)
        result = cma_minimize(counting, 4, cfg, x0=np.zeros(4))
        assert len(calls) <= 1200
        assert result.evals == len(calls)

    def test_restarts_keep_global_best(self):
        # a prior that lands restarts far away must not lose the best point
        def prior(gen):
            return gen.normal(5.0, 0.1, 2)

        cfg = OptimizerConfig(max_evals=900, seed=6, restarts=3)
        result = cma_minimize(sphere, 2, cfg, x0=np.zeros(2), prior=prior)
        assert result.f <= 1e-12

    def test_history_monotone(self):
        cfg = OptimizerConfig(max_evals=2000, seed=7)
        result = cma_minimize(rosenbrock, 4, cfg, x0=np.zeros(4))
        losses = [f for _, f in result.history]
        assert losses == sorted(losses, reverse=True) or all(
            losses[i] >= losses[i + 1] for i in range(len(losses) - 1))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            OptimizerConfig(popsize=2)
        with pytest.raises(ValueError):
            OptimizerConfig(restarts=0)
