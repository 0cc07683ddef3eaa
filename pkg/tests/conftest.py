import numpy as np
import pytest

from elasticopf.grid_model import builtin_case, parse_case

TWO_BUS = """function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.05	0.95;
	2	1	50	20	0	0	1	1	0	230	1	1.05	0.95;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.1	20	10;
];
"""

ONE_BUS = """function mpc = onebus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	60	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
];
mpc.gencost = [
	2	0	0	3	0.02	15	0;
];
"""


def two_bus_text(r=0.01, x=0.1, b=0.0, tap=0.0, shift=0.0, pd=50.0, qd=20.0, rate=0.0):
    branch = f"1\t2\t{r}\t{x}\t{b}\t{rate}\t0\t0\t{tap}\t{shift}\t1\t-360\t360;"
    return (TWO_BUS.replace("1\t2\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;", branch)
            .replace("2\t1\t50\t20", f"2\t1\t{pd}\t{qd}"))


@pytest.fixture
def two_bus():
    return parse_case(two_bus_text(), "twobus")


@pytest.fixture
def one_bus():
    return parse_case(ONE_BUS, "onebus")


@pytest.fixture(scope="session")
def ieee():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = builtin_case(name)
        return cache[name]
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
