"""KPI formulas and the granted-access baseline."""

import math

import numpy as np
import pytest

from gfaloha.kpi import (RA_OPPORTUNITIES, RA_PERIOD, attempt_energy,
                         avg_transmit_power, battery_lifetime,
                         energy_efficiency, expected_delay, grant_free_kpis,
                         granted_attempt_energy, granted_kpis,
                         granted_report_energy, ra_contention,
                         spectral_efficiency, throughput, transmit_power_at,
                         write_report_rows)
from gfaloha.params import EnergyParams, InvalidParamsError, SystemParams

P = SystemParams()
E = EnergyParams()


def test_expected_delay():
    assert expected_delay(0.0, P) == pytest.approx(P.M * P.Tp)
    assert expected_delay(0.5, P) == pytest.approx(
        (P.M * P.Tp + P.Tack) / 0.5 - P.Tack)
    assert expected_delay(1.0, P) == math.inf
    with pytest.raises(InvalidParamsError):
        expected_delay(1.5, P)


def test_transmit_power_control():
    near = transmit_power_at(100.0, P, E)
    far = transmit_power_at(900.0, P, E)
    assert near <= far <= 0.1
    with pytest.raises(InvalidParamsError):
        transmit_power_at(0.0, P, E)
    with pytest.warns(UserWarning):
        transmit_power_at(5000.0, P, E)   # outside power-controlled coverage


def test_avg_transmit_power_formula():
    expect = (2.0 * E.Rc ** E.sigma_pl * P.gamma * P.N0 * P.W * P.Gamma
              / (E.G * (E.sigma_pl + 2.0)))
    assert avg_transmit_power(P, E) == pytest.approx(expect)


def test_attempt_energy_accounting():
    pt = avg_transmit_power(P, E)
    by_hand = ((E.Pc + E.alpha * pt) * P.N * P.Tp
               + E.Pc * (P.M - P.N) * P.Tp + E.Pc * P.Tack)
    assert attempt_energy(P, E) == pytest.approx(by_hand)
    # transmitting more replicas costs more
    assert attempt_energy(P.with_replicas(4), E) > attempt_energy(P, E)


def test_battery_lifetime():
    full = battery_lifetime(0.0, P, E)
    assert full == pytest.approx(E.E0 * E.Tr / (E.Est + attempt_energy(P, E)))
    assert battery_lifetime(0.5, P, E) < full
    assert battery_lifetime(1.0, P, E) == 0.0
    # the literal 1/Po balance coincides with 1/(1-Po) at Po = 0.5 only
    assert battery_lifetime(0.5, P, E, paper_literal=True) == pytest.approx(
        battery_lifetime(0.5, P, E))
    with pytest.raises(InvalidParamsError):
        battery_lifetime(0.0, P, E, paper_literal=True)


def test_energy_and_spectral_efficiency():
    assert energy_efficiency(0.2, P, E) == pytest.approx(
        0.8 * (P.D - P.Doh) / attempt_energy(P, E))
    assert spectral_efficiency(2.0, P) == pytest.approx(
        2.0 * 50.0 / (2.0 * (P.Fm + P.W / 2.0)))
    assert spectral_efficiency(2.0, P, po=0.5) == pytest.approx(
        spectral_efficiency(2.0, P) / 2.0)
    assert throughput(3.0, 0.25) == pytest.approx(2.25)


def test_ra_contention_fixed_point():
    attempts, p_succ, stable = ra_contention(0.5)
    assert stable and attempts >= 1.0
    a = attempts * 0.5 * RA_PERIOD   # attempts/report * reports/period
    # stationarity: offered attempts thin back to the demand
    assert a * math.exp(-a / RA_OPPORTUNITIES) == pytest.approx(
        0.5 * RA_PERIOD, rel=1e-9)
    assert p_succ == pytest.approx(math.exp(-a / RA_OPPORTUNITIES), rel=1e-9)
    assert ra_contention(0.0) == (1.0, 1.0, True)


def test_ra_contention_saturates():
    lam_max = RA_OPPORTUNITIES / math.e / RA_PERIOD
    attempts, p_succ, stable = ra_contention(lam_max * 1.01)
    assert not stable and attempts == math.inf and p_succ == 0.0
    assert ra_contention(lam_max * 0.99)[2]


def test_granted_kpis_stable_and_saturated():
    rep = granted_kpis(0.1, P, E)
    assert rep.outage == 0.0
    assert rep.expected_delay >= RA_PERIOD / 2.0 + E.Dsynch + P.Tp
    e_report = granted_report_energy(P, E, ra_contention(0.1)[0])
    assert rep.battery_lifetime == pytest.approx(E.E0 * E.Tr / e_report)
    sat = granted_kpis(10.0, P, E)
    assert sat.energy_efficiency == 0.0
    assert sat.battery_lifetime == 0.0
    assert sat.expected_delay == math.inf


def test_granted_energy_components():
    burst = granted_attempt_energy(P, E)
    assert burst < attempt_energy(P, E)   # preamble-length vs full frame
    one = granted_report_energy(P, E, attempts=1.0)
    two = granted_report_energy(P, E, attempts=2.0)
    assert two - one == pytest.approx(burst)


def test_grant_free_report_wiring():
    rep = grant_free_kpis(0.2, 0.1, P, E)
    assert rep.outage == 0.1
    assert rep.throughput == pytest.approx(0.18)
    assert rep.expected_delay == pytest.approx(expected_delay(0.1, P))
    d = rep.as_dict()
    assert set(d) == {"outage", "expected_delay", "battery_lifetime",
                      "energy_efficiency", "spectral_efficiency",
                      "throughput", "avg_tx_power"}


def test_write_report_rows(tmp_path):
    path = tmp_path / "rows.csv"
    write_report_rows(path, [{"a": 1.0, "b": "x"}, {"a": 2.5, "b": "y"}])
    lines = path.read_text().splitlines()
    assert lines[0] == "a,b"
    assert lines[1] == "1,x"
    with pytest.raises(InvalidParamsError):
        write_report_rows(tmp_path / "empty.csv", [])
