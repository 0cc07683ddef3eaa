import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticopf.grid_model import (Branch, Bus, CannotReachTarget, DanglingReference,
                                   DisconnectedNetwork, Generator, MalformedRow, MissingTable,
                                   MultipleSlack, NetworkCase, NoSlack, ZeroImpedanceBranch,
                                   build_admittance, builtin_case, case_to_dict,
                                   derive_subnetwork, parse_case, removal_sequence, resolve_case,
                                   write_case)

from conftest import TWO_BUS, two_bus_text

BUILTINS = ["case9", "case14", "case30", "case_ieee30", "case57", "case118", "case300"]


def test_two_bus_fields_echo_input(two_bus):
    assert two_bus.base_mva == 100
    assert two_bus.n_bus == 2
    assert two_bus.buses[1].pd == 50
    assert two_bus.buses[0].kind == "slack" and two_bus.buses[1].kind == "pq"
    assert two_bus.pd_pu[1] == pytest.approx(0.5)
    assert two_bus.generators[0].cost == (0.1, 20.0, 10.0)


@pytest.mark.parametrize("name,counts", [
    ("case9", (9, 3, 9)), ("case14", (14, 5, 20)), ("case30", (30, 6, 41)),
    ("case_ieee30", (30, 6, 41)), ("case57", (57, 7, 80)), ("case118", (118, 54, 186)),
    ("case300", (300, 69, 411)),
])
def test_builtin_counts(name, counts):
    c = builtin_case(name)
    assert (c.n_bus, c.n_gen, c.n_branch) == counts


def test_input_slot_counts_match_table():
    # 84 / 189 / 374 input neurons for the 57/118/300-bus feeders
    assert [builtin_case(n).n_load_slots for n in ("case57", "case118", "case300")] == [84, 189, 374]
    assert len(builtin_case("case57").load_buses) == 42


def test_dangling_generator_reference():
    text = TWO_BUS.replace("\t1\t0\t0\t100\t-100", "\t99\t0\t0\t100\t-100")
    with pytest.raises(DanglingReference):
        parse_case(text)


def test_dangling_branch_reference():
    with pytest.raises(DanglingReference):
        parse_case(TWO_BUS.replace("1\t2\t0.01", "1\t7\t0.01"))


def test_missing_table():
    text = TWO_BUS[:TWO_BUS.index("mpc.branch")] + TWO_BUS[TWO_BUS.index("mpc.gencost"):]
    with pytest.raises(MissingTable):
        parse_case(text)


def test_malformed_row_reports_line():
    text = TWO_BUS.replace("2\t1\t50\t20", "2\t1\tfifty\t20")
    with pytest.raises(MalformedRow) as exc:
        parse_case(text)
    assert exc.value.line == 5


def test_slack_count():
    with pytest.raises(MultipleSlack):
        parse_case(TWO_BUS.replace("2\t1\t50\t20", "2\t3\t50\t20"))
    with pytest.raises(NoSlack):
        parse_case(TWO_BUS.replace("1\t3\t0\t0", "1\t2\t0\t0"))


def test_disconnected_and_degenerate():
    with pytest.raises(ZeroImpedanceBranch):
        build_admittance(parse_case(two_bus_text(r=0.0, x=0.0)))
    text = TWO_BUS.replace("];\nmpc.gen", "\t3\t1\t10\t5\t0\t0\t1\t1\t0\t230\t1\t1.05\t0.95;\n];\nmpc.gen", 1)
    with pytest.raises(DisconnectedNetwork):
        parse_case(text)


def test_external_numbers_remapped():
    text = TWO_BUS.replace("\t1\t3\t", "\t10\t3\t").replace("\t1\t0\t0\t100", "\t10\t0\t0\t100") \
        .replace("1\t2\t0.01", "10\t2\t0.01")
    c = parse_case(text)
    assert list(c.bus_ids) == [10, 2]
    assert c.generators[0].bus == 0 and c.branches[0].from_bus == 0


@pytest.mark.parametrize("name", BUILTINS)
def test_round_trip(name):
    c = builtin_case(name)
    assert parse_case(write_case(c), name) == c


def test_round_trip_keeps_slot_order():
    sub = derive_subnetwork(builtin_case("case30"), 24)
    assert parse_case(write_case(sub), sub.name) == sub


def test_case_dump_is_plain_json_types():
    import json
    d = case_to_dict(builtin_case("case9"))
    assert json.loads(json.dumps(d)) == d


def test_resolve_case(tmp_path):
    p = tmp_path / "mine.m"
    p.write_text(TWO_BUS)
    assert resolve_case(p).name == "mine"
    assert resolve_case("case9").n_bus == 9
    with pytest.raises(FileNotFoundError):
        resolve_case("case_does_not_exist")


# --------------------------------------------------------------------------
# admittance


def test_ybus_pure_reactance():
    Y = build_admittance(parse_case(two_bus_text(r=0.0, x=0.1))).entries
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_ybus_tap_two():
    Y = build_admittance(parse_case(two_bus_text(r=0.0, x=0.1, tap=2))).entries
    np.testing.assert_allclose(Y, [[-2.5j, 5j], [5j, -10j]], atol=1e-12)


def test_ybus_phase_shift_and_charging():
    r, x, b, tap, shift = 0.02, 0.08, 0.1, 1.05, 3.0
    Y = build_admittance(parse_case(two_bus_text(r=r, x=x, b=b, tap=tap, shift=shift))).entries
    y = 1 / complex(r, x)
    t = tap * np.exp(1j * np.deg2rad(shift))
    expect = [[(y + 0.5j * b) / tap ** 2, -y / np.conj(t)], [-y / t, y + 0.5j * b]]
    np.testing.assert_allclose(Y, expect, rtol=1e-14)


def test_ybus_no_branches_is_zero(one_bus):
    assert np.all(build_admittance(one_bus).entries == 0)


def test_ybus_bus_shunt():
    text = TWO_BUS.replace("2\t1\t50\t20\t0\t0", "2\t1\t50\t20\t5\t19")
    Y = build_admittance(parse_case(text)).entries
    Y0 = build_admittance(parse_case(TWO_BUS)).entries
    assert Y[1, 1] - Y0[1, 1] == pytest.approx(0.05 + 0.19j)


@pytest.mark.parametrize("name", ["case9", "case30", "case57"])
def test_ybus_symmetric_without_taps(name):
    c = builtin_case(name)
    flat = dataclasses.replace(c, branches=tuple(dataclasses.replace(br, tap=0.0, shift=0.0)
                                                 for br in c.branches))
    Y = build_admittance(flat).entries
    assert np.array_equal(Y, Y.T)


def _random_network(n, extra_edges, data):
    """Random connected network: a spanning tree plus a few extra edges."""
    buses = tuple(Bus(i + 1, "slack" if i == 0 else "pq", 0.0, 0.0,
                      data.draw(st.floats(-5, 5)), data.draw(st.floats(-5, 5)),
                      0.9, 1.1, 100.0) for i in range(n))
    edges = [(data.draw(st.integers(0, i - 1)), i) for i in range(1, n)] + extra_edges
    imp = st.floats(0.001, 0.5)
    branches = tuple(Branch(f, t, data.draw(imp), data.draw(imp), 0.0) for f, t in edges if f != t)
    gen = Generator(0, 0.0, 100.0, -50.0, 50.0, (0.0, 1.0, 0.0))
    return NetworkCase("rand", 100.0, buses, (gen,), branches)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.data())
def test_row_sums_equal_shunts(n, data):
    extra = data.draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=4))
    c = _random_network(n, extra, data)
    Y = build_admittance(c).entries
    shunt = np.array([complex(b.gs, b.bs) for b in c.buses]) / c.base_mva
    np.testing.assert_allclose(Y.sum(axis=1), shunt, atol=1e-9)
    assert np.array_equal(Y, Y.T)


# --------------------------------------------------------------------------
# sub-networks


def test_derive_full_size_keeps_network_data():
    # same buses/branches/generators; only the slot order becomes the expansion order
    c = builtin_case("case30")
    d = derive_subnetwork(c, 30)
    assert (d.buses, d.generators, d.branches) == (c.buses, c.generators, c.branches)
    assert sorted(d.slot_order) == list(range(30))
    assert derive_subnetwork(d, 30) == d


@pytest.mark.parametrize("target", [1, 200])
def test_derive_unreachable(target):
    with pytest.raises(CannotReachTarget):
        derive_subnetwork(builtin_case("case30"), target)


def test_derive_two_bus_to_one(two_bus):
    with pytest.raises(CannotReachTarget):
        derive_subnetwork(two_bus, 1)


def test_derive_stops_at_generators():
    c = builtin_case("case118")
    floor = c.n_bus - len(removal_sequence(c))
    assert floor == 65
    with pytest.raises(CannotReachTarget):
        derive_subnetwork(c, floor - 1)


def _slot_ids(c):
    return [int(c.bus_ids[i]) for i in c.slot_order]


def _load_ids(c):
    return [int(c.bus_ids[i]) for i in c.p_load_buses], [int(c.bus_ids[i]) for i in c.q_load_buses]


def test_derive_118_feeders():
    base = builtin_case("case118")
    subs = [derive_subnetwork(base, n) for n in (73, 90, 106, 118)]
    assert [s.n_bus for s in subs] == [73, 90, 106, 118]
    assert [s.n_load_slots for s in subs] == [112, 139, 165, 189]
    for small, big in zip(subs, subs[1:]):
        assert _slot_ids(small) == _slot_ids(big)[:small.n_bus]
        ps, qs = _load_ids(small)
        pb, qb = _load_ids(big)
        assert pb[:len(ps)] == ps and qb[:len(qs)] == qs
    # generators and slack are never removed
    assert subs[0].n_gen == base.n_gen


@settings(max_examples=15, deadline=None)
@given(st.integers(12, 30), st.integers(12, 30))
def test_derive_monotone_and_idempotent(a, b):
    base = builtin_case("case_ieee30")
    a, b = min(a, b), max(a, b)
    ca, cb = derive_subnetwork(base, a), derive_subnetwork(base, b)
    assert _slot_ids(ca) == _slot_ids(cb)[:a]
    assert derive_subnetwork(ca, a) == ca
    assert derive_subnetwork(cb, a) == ca
