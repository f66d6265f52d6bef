import math

import numpy as np
import pytest
from scipy.stats import norm

from safeite.acquisition import expected_improvement
from safeite.adaptation import (
    ArchivePrior,
    AdaptationConfig,
    ConfigurationError,
    ConstraintSpec,
    DamagedRobot,
    Strategy,
    Trial,
    TrialLog,
    adapt,
    argmax_with_ties,
    execute_behavior,
    read_trial_log,
    write_trial_log,
)
from safeite.archive import Archive, Elite
from safeite.crawler import D1, NO_DAMAGE, RobotModel, SimResult
from safeite.gp import MapPriorGP

SE = dict(length_scale=0.1, signal_variance=1.0, noise_variance=0.01)


class TableCrawler:
    """Stands in for the simulator: looks up (speed, force) by genotype."""

    def __init__(self, table, fail=()):
        self.table = table
        self.fail = set(fail)
        self.calls = []

    def run(self, genotype):
        key = tuple(np.round(genotype, 12))
        self.calls.append(key)
        if key in self.fail:
            return SimResult(float("nan"), np.zeros(4), 0.0, True)
        speed, force = self.table[key]
        return SimResult(speed, np.zeros(4), force)

    def safety_value(self, result):
        return result.force_sum


class TableRobot:
    def __init__(self, table, fail=()):
        self.crawler = TableCrawler(table, fail)


def synthetic_archive(n, seed, *, res=(4, 4), genotype_size=3):
    rng = np.random.default_rng(seed)
    a = Archive(res)
    while len(a) < n:
        d = rng.random(len(res))
        if a.cell_of(d) in a:
            continue
        a.add(Elite(rng.random(genotype_size), d, rng.normal(0.3, 0.1), [rng.uniform(50, 150)]))
    return a


def truth_table(archive, perturb=None):
    table = {}
    for cell, e in archive:
        speed, force = e.performance, float(e.safety_values[0])
        if perturb is not None:
            speed, force = perturb(cell, speed, force)
        table[tuple(np.round(e.genotype, 12))] = (speed, force)
    return table


def shifted(seed):
    rng = np.random.default_rng(seed)
    return lambda cell, s, f: (s + rng.normal(0, 0.1), f + rng.normal(0, 30))


def dense_posterior(X, prior, Xo, yo, sig2, noise2, ls):
    """Posterior mean and std from an explicit inverse of the Gram matrix."""
    def k(A, B):
        d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        return sig2 * np.exp(-d2 / (2 * ls * ls))
    if len(Xo) == 0:
        return prior.copy(), np.full(len(X), math.sqrt(sig2))
    Kinv = np.linalg.inv(k(Xo, Xo) + noise2 * np.eye(len(Xo)))
    Ks = k(X, Xo)
    prior_o = np.array([prior[np.flatnonzero((X == x).all(1))[0]] for x in Xo])
    mean = prior + Ks @ Kinv @ (yo - prior_o)
    var = sig2 - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, np.sqrt(np.maximum(var, 0))


def eci_oracle(X, perf, safety, threshold, obs, incumbent, safety_scale=0.6):
    """Expected constrained improvement at every cell, recomputed from scratch."""
    sf = np.std(perf)
    sc = safety_scale * np.std(safety)
    Xo = np.array([o[0] for o in obs]).reshape(-1, X.shape[1])
    mf, sdf = dense_posterior(X, perf, Xo, np.array([o[1] for o in obs]), sf ** 2, 0.01 * sf ** 2, 0.1)
    mc, sdc = dense_posterior(X, threshold - safety, Xo, np.array([o[2] for o in obs]),
                              sc ** 2, 0.01 * sc ** 2, 0.1)
    if incumbent is None:
        ei = np.ones(len(X))
    else:
        z = (mf - incumbent) / sdf
        ei = (mf - incumbent) * norm.cdf(z) + sdf * norm.pdf(z)
    return ei * norm.cdf(mc / sdc)


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptationConfig(max_trials=0)
    with pytest.raises(ValueError):
        AdaptationConfig(stop_ratio=1.5)
    with pytest.raises(ValueError):
        ConstraintSpec("force", math.inf)
    assert AdaptationConfig(strategy="mo-ite").strategy is Strategy.MO_ITE


def test_empty_archive_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        adapt(Archive((3,)), TableRobot({}), AdaptationConfig())


@pytest.mark.parametrize("strategy", list(Strategy))
def test_single_cell_archive_runs_one_trial(strategy):
    a = synthetic_archive(1, 0)
    cfg = AdaptationConfig(strategy=strategy, constraints=(ConstraintSpec("force", 100.0),), stop_ratio=None)
    log = adapt(a, TableRobot(truth_table(a)), cfg)
    assert len(log) == 1


@pytest.mark.parametrize("strategy", list(Strategy))
def test_log_invariants(strategy):
    a = synthetic_archive(40, 1, res=(8, 8))
    robot = TableRobot(truth_table(a, shifted(2)))
    cfg = AdaptationConfig(strategy=strategy, max_trials=25, stop_ratio=None,
                           constraints=(ConstraintSpec("force", 100.0),))
    log = adapt(a, robot, cfg)
    assert len(log) == 25
    assert len({t.cell for t in log.trials}) == 25
    assert len(set(robot.crawler.calls)) == 25
    best = -math.inf
    for t in log.trials:
        assert t.feasible == (min(t.measured_constraints) >= 0)
        if t.feasible:
            best = max(best, t.measured_performance)
    assert log.best_safe_performance == best
    assert log.unsafe_count == sum(not t.feasible for t in log.trials)


def test_best_safe_is_non_decreasing():
    a = synthetic_archive(30, 4, res=(8, 8))
    cfg = AdaptationConfig(max_trials=20, stop_ratio=None, constraints=(ConstraintSpec("force", 90.0),))
    trials = adapt(a, TableRobot(truth_table(a, shifted(5))), cfg).trials
    running, prev = TrialLog(), -math.inf
    for t in trials:
        running.append(t)
        assert running.best_safe_performance >= prev
        prev = running.best_safe_performance


def test_site_without_constraints_equals_ite():
    a = synthetic_archive(30, 6, res=(8, 8))
    table = truth_table(a, shifted(7))
    logs = [adapt(a, TableRobot(table), AdaptationConfig(strategy=s, max_trials=15, stop_ratio=None, seed=3))
            for s in (Strategy.SITE, Strategy.ITE)]
    assert [t.cell for t in logs[0].trials] == [t.cell for t in logs[1].trials]
    assert [t.acquisition_value for t in logs[0].trials] == [t.acquisition_value for t in logs[1].trials]


def test_every_site_selection_matches_brute_force_eci():
    a = synthetic_archive(10, 8, res=(4, 4))
    threshold = 100.0
    cells, elites = zip(*a)
    X = np.stack([e.descriptor for e in elites])
    perf = np.array([e.performance for e in elites])
    safety = np.array([e.safety_values[0] for e in elites])
    cfg = AdaptationConfig(max_trials=6, stop_ratio=None, constraints=(ConstraintSpec("force", threshold),))
    log = adapt(a, TableRobot(truth_table(a, shifted(9))), cfg)
    obs, incumbent, tested = [], None, set()
    for t in log.trials:
        score = eci_oracle(X, perf, safety, threshold, obs, incumbent)
        score[[i for i, c in enumerate(cells) if c in tested]] = -1.0
        assert cells[int(np.argmax(score))] == t.cell
        assert t.acquisition_value == pytest.approx(score.max(), rel=1e-9, abs=1e-300)
        tested.add(t.cell)
        obs.append((a[t.cell].descriptor, t.measured_performance, t.measured_constraints[0]))
        if t.feasible:
            incumbent = t.measured_performance if incumbent is None else max(incumbent, t.measured_performance)
    assert len(obs) >= 2


def three_cell_archive():
    a = Archive((3,))
    g = [np.full(2, v) for v in (0.1, 0.5, 0.9)]
    a.add(Elite(g[0], [0.1], 0.5, [140.0]))  # fastest, unsafe under the prior
    a.add(Elite(g[1], [0.5], 0.3, [80.0]))  # the only feasible cell
    a.add(Elite(g[2], [0.9], 0.2, [115.0]))
    return a


def test_three_cell_fixture_first_selection():
    a = three_cell_archive()
    # t = 0: EI is 1 everywhere, so the feasibility product decides
    threshold = 100.0
    cfg = AdaptationConfig(max_trials=1, stop_ratio=None, constraints=(ConstraintSpec("force", threshold),))
    log = adapt(a, TableRobot(truth_table(a)), cfg)
    safety = np.array([140.0, 80.0, 115.0])
    sc = 0.6 * np.std(safety)
    phi = norm.cdf((threshold - safety) / sc)
    assert log.trials[0].cell == (1,)
    assert log.trials[0].acquisition_value == pytest.approx(phi.max(), rel=1e-12)


def test_all_infeasible_picks_highest_feasibility():
    a = three_cell_archive()
    cfg = AdaptationConfig(max_trials=1, stop_ratio=None, constraints=(ConstraintSpec("force", 10.0),))
    log = adapt(a, TableRobot(truth_table(a)), cfg)
    assert log.trials[0].cell == (1,)  # smallest archived force
    assert not log.trials[0].feasible


def test_argmax_tie_break():
    score = np.array([1.0, 2.0, 2.0, 2.0])
    secondary = np.array([9.0, 0.0, 5.0, 5.0])
    assert argmax_with_ties(score, secondary, np.ones(4, bool)) == 2
    assert argmax_with_ties(score, np.zeros(4), np.ones(4, bool)) == 1
    assert argmax_with_ties(score, secondary, np.array([True, True, False, False])) == 1
    with pytest.raises(ConfigurationError):
        argmax_with_ties(score, secondary, np.zeros(4, bool))


def test_priors_equal_truth_stops_after_one_trial():
    a = synthetic_archive(25, 10, res=(8, 8))
    threshold = 100.0
    cfg = AdaptationConfig(stop_ratio=0.9, constraints=(ConstraintSpec("force", threshold),))
    # make the archive's fastest cell feasible so the stop level is reachable
    best_cell = max(a, key=lambda ce: ce[1].performance)[0]
    e = a[best_cell]
    a.cells[best_cell] = Elite(e.genotype, e.descriptor, e.performance, [20.0])
    log = adapt(a, TableRobot(truth_table(a)), cfg)
    feasible = [(e.performance, c) for c, e in a if e.safety_values[0] <= threshold]
    assert len(log) == 1
    assert log.trials[0].cell == max(feasible)[1]


def test_determinism(tmp_path):
    a = synthetic_archive(30, 11, res=(8, 8))
    table = truth_table(a, shifted(12))
    cfg = AdaptationConfig(strategy=Strategy.MO_ITE, stop_ratio=None, max_trials=12,
                           constraints=(ConstraintSpec("force", 100.0),), observation_noise=(0.01, 2.0), seed=5)
    for name in ("a.csv", "b.csv"):
        write_trial_log(adapt(a, TableRobot(table), cfg), tmp_path / name, cfg.strategy, a)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_failed_simulation_is_unsafe_and_loop_continues():
    a = synthetic_archive(12, 13, res=(4, 4))
    table = truth_table(a)
    robot = TableRobot(table, fail=list(table))
    cfg = AdaptationConfig(max_trials=5, stop_ratio=None, constraints=(ConstraintSpec("force", 100.0),))
    log = adapt(a, robot, cfg)
    assert len(log) == 5 and log.unsafe_count == 5
    assert all(t.measured_performance == 0.0 and t.measured_constraints == (-math.inf,) for t in log.trials)


def test_execute_behavior_on_simulator(small_map):
    c = ConstraintSpec("force", 150.0)
    _, e = next(iter(small_map))
    speed, force, margins = execute_behavior(DamagedRobot(), e, (c,))
    assert speed == e.performance and force == e.safety_values[0]
    assert margins == (150.0 - force,)
    rest = Elite(np.r_[np.zeros(16), np.full(8, 0.5)], np.zeros(5), 0.0, [0.0])
    speed, force, _ = execute_behavior(DamagedRobot(), rest, (c,))
    assert abs(speed) < 1e-6 and force == pytest.approx(RobotModel().weight, rel=0.02)
    fastest = small_map.best()
    assert execute_behavior(DamagedRobot(damage=D1), fastest)[0] != fastest.performance


def test_prior_consistency_on_intact_robot(small_map):
    cfg = AdaptationConfig(max_trials=5, stop_ratio=None,
                           constraints=(ConstraintSpec("force", small_map.metadata["safety_threshold"]),))
    log = adapt(small_map, DamagedRobot(damage=NO_DAMAGE), cfg)
    for t in log.trials:
        e = small_map[t.cell]
        assert t.measured_performance == e.performance
        assert t.measured_constraints[0] == cfg.constraints[0].threshold - e.safety_values[0]


def test_trial_log_round_trip(tmp_path):
    a = synthetic_archive(20, 14, res=(8, 8))
    cfg = AdaptationConfig(max_trials=8, stop_ratio=None, constraints=(ConstraintSpec("force", 100.0),))
    log = adapt(a, TableRobot(truth_table(a, shifted(15))), cfg)
    path = tmp_path / "log.csv"
    write_trial_log(log, path, "site", a)
    rows = read_trial_log(path)
    assert list(rows[0]) == ["trial", "cell", "strategy", "performance", "feasible", "constraint_1", "acquisition"]
    for row, t in zip(rows, log.trials):
        assert int(row["trial"]) == t.index
        assert int(row["cell"]) == a.flat_index(t.cell)
        assert row["strategy"] == "site"
        assert float(row["performance"]) == t.measured_performance
        assert bool(int(row["feasible"])) == t.feasible
        assert float(row["constraint_1"]) == t.measured_constraints[0]
        assert float(row["acquisition"]) == t.acquisition_value


def test_read_trial_log_rejects_other_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trial_log(p)


def test_first_ite_selection_uses_prior_mean():
    a = synthetic_archive(15, 16, res=(4, 4))
    log = adapt(a, TableRobot(truth_table(a)), AdaptationConfig(strategy="ite", max_trials=1))
    # no incumbent yet: EI is flat, the posterior mean (= archived speed) breaks the tie
    assert log.trials[0].cell == max(a, key=lambda ce: ce[1].performance)[0]
    assert log.trials[0].acquisition_value == expected_improvement(0.0, None, std=1.0)


def test_trial_type_is_frozen():
    t = Trial(1, (0,), np.zeros(1), 0.1, (1.0,), True, 0.5)
    with pytest.raises(AttributeError):
        t.index = 2


def test_unobserved_gps_reproduce_archive(small_map):
    cells, elites = zip(*small_map)
    X = np.stack([e.descriptor for e in elites])
    perf = np.array([e.performance for e in elites])
    margin = 150.0 - np.array([e.safety_values[0] for e in elites])
    for values in (perf, margin):
        gp = MapPriorGP(prior_mean=ArchivePrior(small_map.resolution, cells, values))
        np.testing.assert_allclose(gp.predict(X), values, rtol=0, atol=1e-9)
    with pytest.raises(ValueError):
        ArchivePrior((4,), [(0,)], [1.0])(np.array([[0.9]]))


def test_site_scores_agree_with_scalar_eci(rng):
    from safeite.acquisition import Posterior, expected_constrained_improvement
    from safeite.adaptation import site_scores
    m, s = rng.normal(size=20), rng.random(20)
    cons = [(rng.normal(size=20), rng.random(20)) for _ in range(2)]
    vec = site_scores(m, s, cons, 0.1)
    for i in range(20):
        scalar = expected_constrained_improvement(Posterior(m[i], s[i]),
                                                  [Posterior(c[0][i], c[1][i]) for c in cons], 0.1)
        assert vec[i] == scalar
