import numpy as np
import pytest

from growthssm.ssm import (Dataset, ModelError, ObservationSeries, Record, StateSpaceModel, TimeGrid,
                           psd_min_pivot, simulate, validate_model)


def _local_level(series, q=1.0, h=0.5):
    n = series.n_steps
    gaps = series.grid.gaps
    return StateSpaceModel(series.times, series.steps, np.ones((series.n_entries, 1)),
                           np.full(series.n_entries, h), np.ones((n - 1, 1, 1)), q * gaps.reshape(-1, 1, 1),
                           np.zeros(1), np.zeros((1, 1)), (0,))


def _data():
    return Dataset((Record("a", "2", 1.0, 3.0), Record("a", "1", 0.5, 1.0), Record("a", "1", 1.0, 2.0),
                    Record("b", "1", 0.0, None), Record("a", "10", 1.0, None)))


def test_timegrid_must_increase():
    with pytest.raises(ModelError):
        TimeGrid([0.0, 1.0, 1.0])
    with pytest.raises(ModelError):
        TimeGrid([])
    assert np.allclose(TimeGrid([0, 0.5, 2]).gaps, [0.5, 1.5])


def test_dataset_rejects_duplicates_and_nonfinite():
    with pytest.raises(ModelError, match="duplicate"):
        Dataset((Record("g", "1", 0.0, 1.0), Record("g", "1", 0.0, 2.0)))
    with pytest.raises(ModelError):
        Dataset((Record("g", "1", float("nan"), 1.0),))


def test_series_layout():
    ds = _data()
    assert ds.groups == ["a", "b"]
    assert ds.replicates("a") == ["1", "2", "10"]  # numeric-looking labels sort numerically
    s = ds.series("a")
    assert s.origin == 0.5
    assert np.allclose(s.times, [0.0, 0.5])
    assert list(s.steps) == [0, 1, 1, 1]
    assert s.replicates == ("1", "1", "2", "10")
    assert np.isnan(s.values[-1]) and s.n_observed == 3
    s2 = ds.series("a", origin=0.0)
    assert np.allclose(s2.times, [0.5, 1.0])
    back = s.to_dataset()
    assert sorted((r.replicate, r.time) for r in back.records) == sorted(
        (r.replicate, r.time) for r in ds.records if r.group == "a")


def test_series_needs_group_and_known_labels():
    ds = _data()
    with pytest.raises(ModelError, match="groups"):
        ds.series()
    with pytest.raises(ModelError, match="not declared"):
        ds.series("a", replicates=["1", "2"])


def test_validate_model_reports():
    s = Dataset(tuple(Record("g", "1", float(t), 1.0) for t in range(4))).series()
    m = _local_level(s)
    rep = validate_model(m, s)
    assert rep.state_dim == 1 and rep.diffuse_count == 1 and rep.n_observed == 4
    bad = StateSpaceModel(m.times, m.obs_steps, m.Z, np.array([0.1, -1.0, 0.1, 0.1]), m.T, m.Q,
                          m.init_mean, m.init_cov, (0,))
    with pytest.raises(ModelError, match="step 1"):
        validate_model(bad, s)
    Q = np.array(m.Q)
    Q[2] = -1.0
    with pytest.raises(ModelError, match="step 2"):
        validate_model(StateSpaceModel(m.times, m.obs_steps, m.Z, m.H, m.T, Q, m.init_mean, m.init_cov, (0,)), s)
    with pytest.raises(ModelError, match="shape"):
        validate_model(StateSpaceModel(m.times, m.obs_steps, np.ones((4, 2)), m.H, m.T, m.Q,
                                       m.init_mean, m.init_cov, (0,)), s)


def test_psd_min_pivot():
    assert psd_min_pivot(np.eye(3)) == 1.0
    assert psd_min_pivot(np.zeros((2, 2))) == 0.0
    assert psd_min_pivot(np.array([[1.0, 2.0], [2.0, 1.0]])) == -np.inf
    v = np.array([1.0, 2.0, 3.0])
    assert psd_min_pivot(np.outer(v, v)) >= -1e-12


def test_simulate_is_seeded_and_needs_diffuse_values():
    s = Dataset(tuple(Record("g", r, float(t), None) for t in range(6) for r in "12")).series()
    m = _local_level(s)
    with pytest.raises(ModelError):
        simulate(m, 0, s)
    d1 = simulate(m, 3, s, initial_state=[5.0])
    d2 = simulate(m, 3, s, initial_state=[5.0])
    assert d1 == d2 and len(d1) == 12
    d3, states = simulate(m, 4, s, initial_state=[5.0], return_states=True)
    assert d3 != d1 and states.shape == (6, 1) and states[0, 0] == 5.0


def test_observation_series_checks():
    with pytest.raises(ModelError):
        ObservationSeries(TimeGrid([0.0, 1.0]), np.array([1, 0]), ("1", "1"), np.array([1.0, 2.0]))
