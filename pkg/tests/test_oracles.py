import pytest

from bulktrace.oracles import navier_plate_deflection

KIRCHHOFF_CENTRE = 0.00406235  # w_max D / (q a^4) of the classical simply supported square plate


def test_thin_plate_tends_to_kirchhoff():
    E, nu, t, q, a = 1.0e6, 0.3, 1e-4, 1.0, 1.0
    D = E * t**3 / (12 * (1 - nu**2))
    w = navier_plate_deflection(E, nu, t, q, a, a, 0.5, 0.5, terms=200)
    assert w * D / (q * a**4) == pytest.approx(KIRCHHOFF_CENTRE, rel=1e-5)


def test_series_converges_in_number_of_terms():
    args = (1.0e6, 0.3, 0.05, 1.0, 1.0, 1.0, 0.5, 0.5)
    w100, w200, w400 = (navier_plate_deflection(*args, terms=n) for n in (100, 200, 400))
    assert abs(w400 - w200) < abs(w200 - w100)
    assert abs(w200 / w400 - 1) < 1e-6


def test_shear_flexibility_adds_deflection():
    args = (1.0e6, 0.3, 0.05, 1.0, 1.0, 1.0, 0.5, 0.5)
    stiff = navier_plate_deflection(*args, alpha_s=1e12)
    assert navier_plate_deflection(*args) > stiff
    assert navier_plate_deflection(*args, alpha_s=5 / 6) > navier_plate_deflection(*args)


def test_rectangular_plate_symmetry():
    w1 = navier_plate_deflection(1.0e6, 0.3, 0.05, 1.0, 2.0, 1.0, 0.5, 0.3)
    w2 = navier_plate_deflection(1.0e6, 0.3, 0.05, 1.0, 2.0, 1.0, 1.5, 0.7)
    assert w1 == pytest.approx(w2, rel=1e-12)
    assert navier_plate_deflection(1.0e6, 0.3, 0.05, 1.0, 1.0, 1.0, 0.0, 0.5) == pytest.approx(0.0, abs=1e-15)
