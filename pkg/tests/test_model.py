import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikeflow.model import (
    DistributionSpec as D,
    NetworkConfig,
    StationSpec,
    aggregate_classes,
    box_upper,
    build_index,
    check_config,
    deflection_channel,
    index_for,
    load_config,
    nominal_rates,
    routing_matrix,
    save_config,
    symmetric_config,
    validate_config,
)


def _with(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    return NetworkConfig.from_dict(d)


def test_valid_symmetric_config_has_no_violations():
    assert validate_config(symmetric_config(2, capacity=5, initial_bikes=3)) == []


def test_small_fleet_is_flagged_for_every_station():
    v = validate_config(symmetric_config(2, capacity=5, initial_bikes=2))
    assert {x.code for x in v} == {"fleet"}
    assert len(v) == 2
    assert "4 <= K_0 = 5" in v[0].message


def test_bad_row_sum_reports_the_row():
    cfg = symmetric_config(3)
    p = np.array(cfg.first_routing)
    p[0] = [0.0, 0.5, 0.4]
    v = validate_config(_with(cfg, first_routing=p.tolist()))
    assert len(v) == 1
    assert v[0].code == "first_routing" and "row 0 sums to 0.9" in v[0].message


def test_other_violations():
    cfg = symmetric_config(2)
    p = np.array(cfg.deflect_routing)
    p[1, 1] = 0.5
    v = validate_config(_with(cfg, deflect_routing=p.tolist()))
    assert any("diagonal" in x.message for x in v)
    bad = cfg.replace_stations([StationSpec(5, 0, D.exponential(1.0))] * 2)
    assert any(x.code == "initial_bikes" for x in validate_config(bad))
    bad_law = cfg.replace_stations([StationSpec(5, 3, D("exponential", -1.0, 1.0))] * 2)
    assert any(x.code == "arrival" for x in validate_config(bad_law))
    with pytest.raises(ValueError):
        check_config(bad)


def test_index_layout_n2():
    idx = build_index(symmetric_config(2))
    assert idx.dim == 6
    assert list(idx.station_index) == [0, 1]
    assert [idx.road(0, 1, 1), idx.road(0, 1, 2), idx.road(1, 0, 1), idx.road(1, 0, 2)] == [2, 3, 4, 5]
    assert idx.labels() == ["S0", "S1", "R0>1c1", "R0>1c2", "R1>0c1", "R1>0c2"]


def test_index_dim_n3():
    assert index_for(3).dim == 15


@given(st.integers(2, 7))
def test_index_is_a_bijection(N):
    idx = index_for(N)
    assert idx.dim == N + 2 * N * (N - 1)
    seen = sorted(idx.road_class_index.values())
    assert seen == list(range(N, idx.dim))
    for (j, i, d), k in idx.road_class_index.items():
        assert (idx.origin[k], idx.dest[k], idx.kind[k]) == (j, i, d)


def test_routing_matrix_entries():
    cfg = symmetric_config(2)
    idx = build_index(cfg)
    P = routing_matrix(cfg, idx)
    # road into station 1 feeds it; station 0 feeds its only class-1 road
    assert P[idx.road(0, 1, 1), 1] == 1.0
    assert P[0, idx.road(0, 1, 1)] == 1.0
    np.testing.assert_allclose(P[idx.N:].sum(1), 1.0)


def test_uniform_deflection_channel_n3():
    cfg = symmetric_config(3)
    idx = build_index(cfg)
    D_ = deflection_channel(cfg, idx)
    k = idx.road(0, 1, 1)
    assert D_[k, idx.road(1, 0, 2)] == 0.5
    assert D_[k, idx.road(1, 2, 2)] == 0.5
    assert D_[k].sum() == pytest.approx(1.0)


def test_aggregate_classes_sums_road_classes():
    idx = index_for(2)
    x = np.arange(6)
    np.testing.assert_array_equal(aggregate_classes(x, idx), [0, 1, 5, 9])


def test_nominal_rates_and_box():
    cfg = symmetric_config(2, arrival=D.exponential(0.5), travel_first=D.deterministic(2.0))
    idx = index_for(2)
    r = nominal_rates(cfg, idx)
    np.testing.assert_allclose(r.b_station, [2.0, 2.0])
    np.testing.assert_allclose(r.b_road, [0.5, 1.0, 0.5, 1.0])
    np.testing.assert_allclose(nominal_rates(cfg, idx, class2=0.0).b_road, [0.5, 0, 0.5, 0])
    np.testing.assert_array_equal(box_upper(cfg, idx), [5, 5, 6, 6, 6, 6])


def test_distribution_means_and_cv():
    rng = np.random.default_rng(0)
    for law in (D.exponential(2.0), D.gamma(2.0, 3.0), D.lognormal(2.0, 0.5)):
        x = law.sample(rng, 200_000)
        assert x.mean() == pytest.approx(2.0, rel=0.05)
        assert x.std() / x.mean() == pytest.approx(law.cv, rel=0.1)
    assert np.all(D.deterministic(1.5).sample(rng, 5) == 1.5)


def test_config_file_round_trip(tmp_path):
    cfg = symmetric_config(3, travel_deflect=D.gamma(1.0, 2.0))
    path = tmp_path / "c.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back.digest() == cfg.digest()


def test_malformed_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"N": 2}))
    with pytest.raises(ValueError):
        load_config(path)
    path.write_text("{not json")
    with pytest.raises(ValueError):
        load_config(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(1, 4), st.floats(0.1, 5.0))
def test_digest_is_stable_under_round_trip(N, c, mean):
    cfg = symmetric_config(N, capacity=N * c, initial_bikes=c, arrival=D.exponential(mean))
    assert NetworkConfig.from_dict(json.loads(cfg.canonical_json())).digest() == cfg.digest()
