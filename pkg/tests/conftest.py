import numpy as np
import pytest

from ucwarm.core import Storage, make_generator, make_instance


def gen(i=0, **kw):
    base = dict(id=i, c_var=10.0, c_noload=5.0, c_startup=100.0, p_min=10.0, p_max=100.0,
                min_up=1, min_down=1, ramp_up=100.0, ramp_down=100.0, startup_ramp=None,
                init_status=0, init_duration=None, init_power=0.0)
    base.update(kw)
    return make_generator(**base)


def instance(gens, load, solar=None, wind=None, storage=None, id="t"):
    T = len(load)
    solar = np.zeros(T) if solar is None else solar
    wind = np.zeros(T) if wind is None else wind
    return make_instance(gens, storage or Storage(), load, solar, wind, id=id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
