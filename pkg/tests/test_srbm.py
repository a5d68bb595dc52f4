import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikeflow import srbm
from bikeflow.model import DistributionSpec as D, NominalRates, index_for, nominal_rates, symmetric_config

from configs import random_config


def _rbm1d(theta=-1.0, var=1.0, upper=np.inf, x0=0.0):
    return srbm.SrbmParams(theta=[theta], gamma=[[var]], R0=[[1.0]], RK=np.zeros((1, 0)),
                           upper=[upper], x0=[x0])


def test_zero_rates_give_zero_drift():
    cfg = symmetric_config(3)
    idx = index_for(3)
    r = NominalRates(np.zeros(3), np.zeros(idx.dim - 3))
    assert np.all(srbm.drift_vector(cfg, r, idx) == 0)


def test_balanced_class1_and_class2_drift():
    cfg = symmetric_config(2)
    r = NominalRates(np.array([1.0, 1.0]), np.array([1.0, 0.3, 1.0, 0.3]))
    th = srbm.drift_vector(cfg, r)
    assert th[2] == 0.0
    assert th[3] == pytest.approx(-0.3)
    # station 1 receives 1 + 0.3 and rents at rate 1
    assert th[1] == pytest.approx(0.3)


def test_reflection_matrix_entries():
    cfg = symmetric_config(2)
    r = NominalRates(np.array([1.0, 1.0]), np.array([0.5, 1.0, 0.5, 1.0]))
    R0, RK = srbm.reflection_matrices(cfg, r)
    assert RK[0, 0] == -1.0 and RK[1, 1] == -1.0
    # a blocked return at station 1 sends the bike onto road 1 -> 0 class 2
    assert RK[5, 1] == 1.0
    assert R0[2, 2] == 0.5
    np.testing.assert_allclose(R0.sum(axis=0), 0.0)
    np.testing.assert_allclose(RK.sum(axis=0), 0.0)


def test_degenerate_covariance_vanishes():
    det = D.deterministic(1.0)
    cfg = symmetric_config(2, arrival=det, travel_first=det, travel_deflect=det)
    r = nominal_rates(cfg)
    assert np.all(srbm.covariance_matrix(cfg, r) == 0)
    assert np.all(srbm.covariance_from_primitives(cfg, r) == 0)


def test_station_road_cross_term():
    cfg = symmetric_config(2)
    r = nominal_rates(cfg)
    G = srbm.covariance_matrix(cfg, r)
    assert G[0, 2] == 1.0
    # composed from primitives a rental leaves the station and enters the road
    Gp = srbm.covariance_from_primitives(cfg, r)
    assert Gp[0, 2] == -1.0


def test_primitive_covariance_conserves_total():
    cfg = symmetric_config(3)
    G = srbm.covariance_from_primitives(cfg, nominal_rates(cfg))
    assert abs(G.sum()) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_covariances_symmetric_psd_on_random_configs(s):
    cfg = random_config(np.random.default_rng(s))
    r = nominal_rates(cfg)
    for G in (srbm.covariance_matrix(cfg, r), srbm.covariance_from_primitives(cfg, r)):
        np.testing.assert_array_equal(G, G.T)
        srbm.check_covariance(G)


def test_check_covariance_rejects():
    with pytest.raises(srbm.CovarianceError):
        srbm.check_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(srbm.CovarianceError):
        srbm.check_covariance(np.array([[1.0, 0.5], [0.0, 1.0]]))
    L = srbm.psd_sqrt(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(L @ L.T, [[2.0, 1.0], [1.0, 2.0]])


def test_s_matrix_examples():
    assert srbm.is_s_matrix(np.eye(3))
    assert not srbm.is_s_matrix([[1.0, -2.0], [-2.0, 1.0]])
    assert srbm.is_s_matrix([[-1.0, 0.2], [-3.0, 0.1], [0.0, 5.0]])
    assert not srbm.is_s_matrix(np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.integers(0, 2))
def test_positive_column_certifies(vals, k):
    A = np.array(vals).reshape(3, 3)
    A[:, k] = np.abs(A[:, k]) + 0.1
    assert srbm.is_s_matrix(A)


def test_geometry_n2_symmetric_passes():
    cfg = symmetric_config(2, travel_deflect=D.deterministic(1.0))
    p = srbm.srbm_params(cfg, nominal_rates(cfg))
    rep = srbm.verify_reflection_geometry(p)
    assert rep.passed
    assert rep.summary().startswith("all maximal face sets pass")


def test_geometry_detects_zeroed_station_column():
    # two capped coordinates; the upper face of the first loses its direction
    p = srbm.SrbmParams(theta=[0.0, 0.0], gamma=np.eye(2), R0=np.eye(2), RK=-np.eye(2),
                        upper=[1.0, 1.0])
    assert srbm.verify_reflection_geometry(p, mode="box").passed
    p.RK[:, 0] = 0.0
    rep = srbm.verify_reflection_geometry(p, mode="box")
    assert rep.failures == [{"lower": [1], "upper": [0]}]


def test_network_geometry_survives_a_zeroed_station_column():
    # road idle directions also push a full station down, so the vertex
    # condition still holds; recorded as a limit of the fault injection
    cfg = symmetric_config(2)
    p = srbm.srbm_params(cfg, nominal_rates(cfg))
    p.RK[:, 0] = 0.0
    assert srbm.verify_reflection_geometry(p).passed


def test_box_mode_all_lower_vertex():
    # every column of R0 sums to zero, so the all-lower vertex has no certificate
    cfg = symmetric_config(2)
    p = srbm.srbm_params(cfg, nominal_rates(cfg))
    A = srbm.vertex_matrix(p, list(range(p.dim)), [])
    assert not srbm.is_s_matrix(A)
    assert not srbm.verify_reflection_geometry(p, mode="box").passed


def test_geometry_precondition():
    p = srbm.srbm_params(symmetric_config(4), nominal_rates(symmetric_config(4)))
    with pytest.raises(ValueError):
        srbm.verify_reflection_geometry(p)
    rep = srbm.verify_reflection_geometry(p, n_samples=200, seed=1)
    assert rep.sampled and rep.checked > 0


def test_path_stays_in_box_and_pushes_are_monotone():
    p = srbm.SrbmParams(theta=[0.0], gamma=[[1.0]], R0=[[1.0]], RK=[[-1.0]], upper=[2.0], x0=[1.0])
    out = srbm.simulate_srbm(p, 200, 1e-2, 3, record_every=1)
    assert out.z.min() >= 0.0 and out.z.max() <= 2.0
    assert np.all(np.diff(out.pushes, axis=0) >= 0)


def test_pushes_happen_only_on_the_face():
    out = srbm.simulate_srbm(_rbm1d(), 100, 1e-2, 5, record_every=1)
    inc = np.diff(np.concatenate([[0.0], out.pushes[:, 0]])) > 0
    assert inc.any()
    assert np.all(out.z[inc, 0] <= 1e-12)


def test_network_srbm_stays_in_box():
    cfg = symmetric_config(2, capacity=3, initial_bikes=2, travel_deflect=D.deterministic(1.0))
    p = srbm.srbm_params(cfg, nominal_rates(cfg))
    out = srbm.simulate_srbm(p, 200, 1e-2, 1, record_every=1)
    assert np.all(out.z >= p.lower - 1e-12) and np.all(out.z <= p.upper + 1e-12)
    assert np.allclose(out.z.sum(axis=1), 4.0, atol=1e-6)


def test_no_noise_no_drift_is_constant():
    p = srbm.SrbmParams(theta=[0.0, 0.0], gamma=np.zeros((2, 2)), R0=np.eye(2),
                        RK=np.zeros((2, 0)), upper=[5.0, 5.0], x0=[1.0, 2.0])
    out = srbm.simulate_srbm(p, 10, 1e-2, 0)
    assert np.all(out.z == [1.0, 2.0])


def test_seed_reproducible():
    a = srbm.simulate_srbm(_rbm1d(), 50, 1e-2, 7)
    b = srbm.simulate_srbm(_rbm1d(), 50, 1e-2, 7)
    np.testing.assert_array_equal(a.z, b.z)


def test_simulate_preconditions():
    p = _rbm1d()
    for kw in ({"dt": 0}, {"T": 0}, {"burn_in": 10}, {"x0": [-1.0]}):
        args = {"T": 10, "dt": 1e-2, "seed": 0}
        args.update(kw)
        with pytest.raises(ValueError):
            srbm.simulate_srbm(p, **args)


def test_params_round_trip_and_corrupt_file(tmp_path):
    cfg = symmetric_config(2)
    p = srbm.srbm_params(cfg, nominal_rates(cfg))
    p.save(tmp_path / "p.json")
    q = srbm.SrbmParams.load(tmp_path / "p.json")
    np.testing.assert_array_equal(q.gamma, p.gamma)
    assert q.labels == p.labels
    (tmp_path / "bad.json").write_text('{"theta": [1]}')
    with pytest.raises(ValueError):
        srbm.SrbmParams.load(tmp_path / "bad.json")
