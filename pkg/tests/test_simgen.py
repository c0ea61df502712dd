import math

import numpy as np
import pytest
from scipy import signal

from gapdpm import simgen
from gapdpm.data import write_csv


def test_scenario_sizes():
    s1, s2 = simgen.generate(simgen.scenario1(7)), simgen.generate(simgen.scenario2(7))
    assert (s1.N, s1.J) == (300, 10) and (s2.N, s2.J) == (200, 10)
    assert all(s.n_gaps == 10 and not s.censored for s in s1.subjects + s2.subjects)


def test_scenario_parameters():
    g = simgen.scenario1().groups
    assert [x.count for x in g] == [100, 100, 100]
    assert g[0].lags == () and g[0].innovation_sd == 1.2
    assert g[1].lags == (1.0, 0.7) and g[1].innovation_sd == 1.5 and g[1].initial_sd == 1.5
    assert g[2].lags == (1.0, 0.7, 0.4) and g[2].innovation_sd == 0.9
    g = simgen.scenario2().groups
    assert g[0].lags == (0.9, 0.7) and g[0].innovation_sd == 0.9 and g[0].initial_sd == 1.5
    assert g[1].lags == (-0.9, -0.7) and g[1].innovation_sd == 1.5


def test_fixed_seed_identical_bytes(tmp_path):
    for name in "ab":
        write_csv(simgen.generate(simgen.scenario2(3)), tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    write_csv(simgen.generate(simgen.scenario2(4)), tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_white_noise_means():
    spec = simgen.ScenarioSpec((simgen.Group(400, (), 1.0, 1.0),), 10, seed=1)
    Y, _ = simgen.generate_log_gaps(spec)
    assert np.all(np.abs(Y.mean(axis=0)) < 4 / math.sqrt(400))


def _lag1_corr(Y):
    return np.corrcoef(Y[:, 1:].ravel(), Y[:, :-1].ravel())[0, 1]


def _oracle_paths(rng, group, n_subj, n):
    # AR recursion as an IIR filter; the first shock carries the initial sd
    e = rng.standard_normal((n_subj, n)) * group.innovation_sd
    e[:, 0] *= group.initial_sd / group.innovation_sd
    return signal.lfilter([1.0], np.concatenate(([1.0], -np.array(group.lags))), e, axis=1)


@pytest.mark.parametrize("scenario,k", [("2", 1), ("2", 0), ("1", 0), ("1", 1)])
def test_lag1_autocorrelation_matches_oracle(scenario, k):
    spec = simgen.SCENARIOS[scenario](11)
    Y, labels = simgen.generate_log_gaps(spec)
    stat = _lag1_corr(Y[labels == k])
    g = spec.groups[k]
    rng = np.random.default_rng(99)
    reps = np.array([_lag1_corr(_oracle_paths(rng, g, g.count, spec.n_per_subject))
                     for _ in range(400)])
    assert abs(stat - reps.mean()) < 3 * reps.std(ddof=1)


def test_censoring_switch_shortens_last_gap():
    spec = simgen.ScenarioSpec((simgen.Group(50, (0.5,), 1.0, 1.0),), 4, seed=2, censor_rate=0.5)
    Y, _ = simgen.generate_log_gaps(spec)
    ds = simgen.generate(spec)
    cens = [s for s in ds.subjects if s.censored]
    assert 0 < len(cens) < 50
    for i, s in enumerate(ds.subjects):
        if s.censored:
            assert s.log_gaps[-1] < Y[i, -1]
        else:
            assert np.allclose(s.log_gaps, Y[i])


def test_invalid_group_rejected():
    with pytest.raises(ValueError):
        simgen.Group(0)
    with pytest.raises(ValueError):
        simgen.Group(3, (), 0.0)
