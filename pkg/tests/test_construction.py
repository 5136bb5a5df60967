import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankone.construction import (
    ConstructionParams,
    Family,
    build_stages,
    default_schedule,
    spacer_value,
    stage_table_csv,
    tail_mass_bound,
)
from rankone.errors import ParameterError, StageDepthError


def feps(eps=0.5, h1=1.0, max_stage=20):
    return build_stages(ConstructionParams(Family.FEPS, eps=eps, h1=h1, max_stage=max_stage))


@pytest.mark.parametrize(
    "j, i, eps, expected",
    [(4, 2, 0.5, 1.0), (4, 3, 0.5, 0.125), (1, 1, 0.5, 0.5)],
)
def test_spacer_value_examples(j, i, eps, expected):
    assert spacer_value(j, i, eps) == pytest.approx(expected, abs=1e-15)


def test_spacer_branch_is_exact_real_comparison():
    # (1 - 0.3) * 10 is exactly 7 as a real number, so i = 7 stays in the first branch
    assert spacer_value(10, 7, 0.3) == pytest.approx(7 / math.sqrt(10))
    assert spacer_value(10, 8, 0.3) == pytest.approx(1 / 10**1.5)


@pytest.mark.parametrize("args", [(4, 0, 0.5), (4, 5, 0.5), (4, 2, 0.0), (4, 2, 1.0), (0, 1, 0.5)])
def test_spacer_value_rejects_bad_arguments(args):
    with pytest.raises(ParameterError):
        spacer_value(*args)


def test_heights_hand_values():
    stages = feps()
    assert stages.stage(2).height == pytest.approx(1.5, abs=1e-15)
    assert stages.stage(3).height == pytest.approx(3 + 3 * math.sqrt(2) / 4, abs=1e-14)


def test_odometer_doubles():
    stages = build_stages(ConstructionParams("OdometerControl", max_stage=12))
    assert [s.height for s in stages] == [2.0 ** (j - 1) for j in range(1, 13)]
    assert all(s.cuts == 2 and s.spacers.total == 0 for s in stages)


def test_staircase_reference_family():
    stages = build_stages(ConstructionParams("Staircase", max_stage=5))
    s = stages.stage(4)
    assert s.cuts == 4
    np.testing.assert_array_equal(s.spacers.values, [1, 2, 3, 4])


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0.01, 0.99), h1=st.floats(0.05, 10.0))
def test_stage_invariants(eps, h1):
    stages = feps(eps=eps, h1=h1, max_stage=25)
    for a, b in zip(stages, stages[1:]):
        assert abs(b.height - (a.height * a.cuts + a.spacers.total)) <= 1e-9 * b.height
        assert b.width == pytest.approx(a.width / a.cuts, rel=1e-12)
        # last column plus its spacer fills the next tower
        assert a.column_offsets[-1] + a.height + a.spacers.values[-1] == pytest.approx(b.height, rel=1e-12)
        assert b.tower_mass >= a.tower_mass
        assert a.added_spacer_mass >= 0
    for s in stages:
        assert s.column_offsets[0] == 0
        np.testing.assert_allclose(np.diff(s.column_offsets), s.height + s.spacers.values[:-1])
        assert len(s.spacers) == s.cuts == s.index
        # each branch of the formula increases with i
        assert np.all(s.spacers.values >= 0)
    cumulative = 1.0
    for s in stages:
        assert s.width == pytest.approx(cumulative, rel=1e-12)
        cumulative /= s.cuts


def test_added_mass_ratio_decays():
    stages = feps(max_stage=40)
    added = [s.added_spacer_mass for s in stages]
    assert all(added[k + 1] / added[k] < 1 for k in range(3, 39))


def test_tail_mass_bound_examples():
    odo = build_stages(ConstructionParams("OdometerControl", max_stage=8))
    assert all(tail_mass_bound(odo, J) == 0 for J in range(1, 9))

    stages = feps(max_stage=20)
    direct = math.fsum(s.added_spacer_mass for s in stages[1:20])
    assert tail_mass_bound(stages, 2) == pytest.approx(direct, rel=1e-12)
    last = stages[-1].added_spacer_mass
    assert last <= tail_mass_bound(stages, 20) <= last * 1.1
    assert stages.total_mass == pytest.approx(stages[-1].tower_mass + tail_mass_bound(stages, 20))
    with pytest.raises(ParameterError):
        tail_mass_bound(stages, 21)


def test_slow_mix_schedule():
    params = ConstructionParams("SlowMix", max_stage=120)
    assert params.eps_schedule == default_schedule(120) == ((16, 0.5), (32, 0.25), (64, 0.125), (128, 0.0625))
    assert params.eps_at(16) == 0.5 and params.eps_at(17) == 0.25 and params.eps_at(113) == 0.0625
    assert params.block_ranges()[-1] == (113, 120)
    stages = build_stages(params)
    assert stages.stage(20).spacers.values[-1] == pytest.approx(spacer_value(20, 20, 0.25))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(family="FEps", eps=1.2),
        dict(family="FEps"),
        dict(family="FEps", eps=0.5, h1=0),
        dict(family="FEps", eps=0.5, max_stage=0),
        dict(family="SlowMix", eps_schedule=((4, 0.1), (4, 0.2))),
        dict(family="Spiral"),
    ],
)
def test_invalid_params(kwargs):
    with pytest.raises(ParameterError):
        ConstructionParams(**kwargs)


def test_overflow_names_failing_stage():
    with pytest.raises(StageDepthError) as info:
        feps(max_stage=200)
    assert info.value.stage == 172
    assert feps(max_stage=171).stage(171).height < math.inf


def test_stage_table_csv():
    stages = feps(max_stage=10)
    rows = stage_table_csv(stages).splitlines()
    assert rows[0] == "j,r_j,h_j,w_j,added_spacer_mass"
    assert [float(r.split(",")[2]) for r in rows[1:]] == [s.height for s in stages]
