import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsde.pathspace import (
    CertificationError,
    DriftSpec,
    FunctionalSpec,
    Segment,
    ShapeError,
    bounded_by_declaration,
    certify_constants,
    eval_B,
    eval_b,
    segment_distance,
    sup_norm,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_segment_grid_ends_at_zero():
    s = Segment.constant(0.1, 64, 1.0)
    assert s.times[-1] == 0.0 and s.times[0] == pytest.approx(-0.1)
    assert s.h == pytest.approx(0.1 / 64)


def test_segment_shape_errors():
    with pytest.raises(ShapeError):
        Segment(1.0, np.array([1.0]))
    with pytest.raises(ShapeError):
        Segment(1.0, np.array([1.0, np.nan]))
    with pytest.raises(ShapeError):
        Segment.zero(1.0, 4) - Segment.zero(1.0, 8)


@given(arrays(float, (9, 2), elements=finite), arrays(float, (9, 2), elements=finite))
def test_distance_is_a_metric(a, b):
    x, y = Segment(1.0, a), Segment(1.0, b)
    assert segment_distance(x, y) == pytest.approx(segment_distance(y, x))
    assert segment_distance(x, x) == 0.0
    z = Segment.zero(1.0, 8, 2)
    assert segment_distance(x, y) <= segment_distance(x, z) + segment_distance(z, y) + 1e-9


def test_csv_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    s = Segment(0.3, rng.normal(size=(13, 2)))
    s.to_csv(tmp_path / "s.csv")
    t = Segment.from_csv(tmp_path / "s.csv")
    assert np.array_equal(s.values, t.values) and t.r0 == pytest.approx(0.3, rel=1e-15)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "time_offset,x_1,x_2"


def test_presets():
    assert sup_norm(Segment.from_preset({"spike": 3.0}, 1.0, 8)) == 3.0
    assert sup_norm(Segment.from_preset("zero", 1.0, 8)) == 0.0
    with pytest.raises(ValueError):
        Segment.from_preset({"bogus": 1}, 1.0, 8)


def test_holder_power_values():
    b = DriftSpec.holder_power(2.0, 0.5, 1.0)
    np.testing.assert_allclose(eval_b(b, np.array([-4.0, -0.25, 0.0, 0.25])), [-2, -1, 0, 1])
    assert b.declared_b_inf() == 2.0
    assert b.declared_kappa() == pytest.approx(2 * 2**0.5)


@pytest.mark.parametrize("spec", [
    DriftSpec.holder_power(1.0, 0.5, 1.0),
    DriftSpec.holder_power(0.5, 0.3, 2.0),
])
@pytest.mark.parametrize("d", [1, 3])
def test_drift_declarations_hold(spec, d):
    rep = certify_constants(spec, trials=1_000_000, seed=1, d=d)
    assert rep.passed and rep.max_ratio > 0.5 * rep.declared


@pytest.mark.parametrize("spec", [
    FunctionalSpec.terminal_saturated(0.05),
    FunctionalSpec.window_average(0.3, 2.0),
])
def test_functional_declarations_hold(spec):
    rep = certify_constants(spec, trials=1_000_000, seed=2, m=8)
    assert rep.passed and rep.max_ratio > 0.5 * rep.declared
    assert bounded_by_declaration(spec, n=200_000) <= spec.declared_B_inf() * (1 + 1e-12)


def test_understated_constant_is_caught():
    class Liar(FunctionalSpec):
        def declared_lambda_B(self, d=1):
            return 0.5 * self.scale

    with pytest.raises(CertificationError) as err:
        certify_constants(Liar("terminal_saturated", 1.0), trials=10_000, m=4)
    assert err.value.witness is not None


def test_window_average_is_trapezoid():
    seg = Segment(1.0, np.linspace(0.0, 1.0, 5))
    assert eval_B(FunctionalSpec.window_average(1.0, 10.0), seg)[0] == pytest.approx(0.5)
    assert eval_B(FunctionalSpec.terminal_saturated(2.0), Segment.constant(1.0, 4, 1.0))[0] == 1.0


def test_spec_roundtrip():
    for s in (FunctionalSpec.zero(), FunctionalSpec.terminal_saturated(0.1),
              FunctionalSpec.window_average(0.1, 3.0)):
        assert FunctionalSpec.from_dict(s.to_dict()) == s
    b = DriftSpec.holder_power(1.0, 0.5, 1.0)
    assert DriftSpec.from_dict(b.to_dict()) == b
