import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from story_adapter.story_model import RunConfig
from story_adapter.weight_schedule import fixed_schedule, linear_schedule, schedule_for

unit = st.floats(0.0, 1.0, allow_nan=False)
lengths = st.integers(1, 200)


def test_default_endpoints_and_spacing():
    s = linear_schedule(0.3, 0.5, 10)
    assert len(s) == 10
    assert s[0] == 0.3 and s[-1] == 0.5
    assert abs(s[1] - (0.3 + 0.2 / 9)) < 1e-12
    assert abs(s[1] - 0.322222) < 1e-6


def test_constant_and_fixed_cases():
    assert list(linear_schedule(0.5, 0.5, 3)) == [0.5, 0.5, 0.5]
    assert list(fixed_schedule(0.3, 10)) == [0.3] * 10
    assert list(fixed_schedule(0.5, 10)) == [0.5] * 10
    assert list(fixed_schedule(0.0, 1)) == [0.0]
    assert list(linear_schedule(0.2, 0.9, 1)) == [0.2]


@pytest.mark.parametrize("args", [(-0.1, 0.5, 3), (0.3, 1.2, 3), (0.3, 0.5, 0)])
def test_linear_errors(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


@pytest.mark.parametrize("args", [(1.1, 3), (-0.5, 3), (0.3, 0)])
def test_fixed_errors(args):
    with pytest.raises(ValueError):
        fixed_schedule(*args)


@given(unit, lengths)
def test_degenerate_linear_equals_fixed(a, n):
    assert list(linear_schedule(a, a, n)) == list(fixed_schedule(a, n))


@given(unit, unit, st.integers(2, 200))
def test_linear_properties(a, b, n):
    lo, hi = min(a, b), max(a, b)
    s = np.array(list(linear_schedule(lo, hi, n)))
    assert s[0] == lo and s[-1] == hi
    gaps = np.diff(s)
    assert np.all(gaps >= -1e-15)
    assert abs(gaps.max() - (hi - lo) / (n - 1)) < 1e-12
    assert np.all((s >= 0) & (s <= 1))


def test_schedule_for_config():
    assert schedule_for(RunConfig(iterations=0)) is None
    assert list(schedule_for(RunConfig(iterations=4, lambda_mode="fixed", lambda_value=0.5))) == [0.5] * 4
    assert list(schedule_for(RunConfig())) == list(linear_schedule(0.3, 0.5, 10))
