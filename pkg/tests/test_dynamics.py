import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpbalance.dynamics import (
    FURUTA_DEFAULTS,
    THREE_LINK_DEFAULTS,
    ModelParameterError,
    State,
    _zero_forces,
    accel,
    check_nominal_conditions,
    christoffel_coriolis,
    furuta_model,
    furuta_nominal_constant,
    furuta_nominal_varying,
    mass_matrix_derivatives,
    nominal_from_robot,
    three_link_model,
    three_link_nominal,
    total_energy,
)

import oracles

angles = st.floats(-math.pi, math.pi, allow_nan=False)
rates = st.floats(-5.0, 5.0, allow_nan=False)


def vec(k, elem):
    return st.lists(elem, min_size=k, max_size=k).map(np.array)


def test_three_link_tabulated_entries():
    d = three_link_model().mass_matrix(np.zeros(3))
    assert d[2, 2] == pytest.approx(0.0076875, abs=1e-15)
    assert d[0, 2] == pytest.approx(0.0024375, abs=1e-15)
    assert d[2, 0] == d[0, 2]


@given(vec(3, angles))
def test_three_link_mass_matches_symbolic(q):
    ref = oracles.three_link_mass(THREE_LINK_DEFAULTS, q)
    np.testing.assert_allclose(three_link_model().mass_matrix(q), ref, atol=1e-14)


@given(st.floats(-1.5, 1.5))
def test_three_link_g3_vanishes_on_upright(theta2):
    q = np.array([0.3, theta2, -theta2])
    assert abs(three_link_model().gravity(q)[2]) < 1e-15


def test_three_link_equilibrium_is_at_rest():
    model = three_link_model()
    p = model.params
    # G2 = 0 with theta3 = -theta2 needs cos(theta2) = 0
    q = np.array([0.2, math.pi / 2, -math.pi / 2])
    assert np.abs(model.gravity(q)).max() < 1e-14
    np.testing.assert_allclose(accel(model, q, np.zeros(3), np.zeros(2)), 0.0, atol=1e-12)
    assert p["m3"] == 0.3


@settings(max_examples=40, deadline=None)
@given(vec(2, angles), vec(2, rates), st.floats(-2, 2))
def test_furuta_accel_matches_lagrangian_oracle(q, qd, u):
    model = furuta_model({"C": 4.8363, "kgkt": 0.01})
    ref = oracles.furuta_accel(dict(model.params), q, qd, [u])
    np.testing.assert_allclose(accel(model, q, qd, np.array([u])), ref, rtol=1e-8, atol=1e-8)


@given(vec(2, angles))
def test_furuta_mass_matches_kinematic_oracle(q):
    model = furuta_model()
    np.testing.assert_allclose(model.mass_matrix(q), oracles.furuta_mass(dict(model.params), q), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(vec(3, angles), vec(3, rates))
def test_christoffel_matches_symbolic(q, qd):
    c_ref = oracles.three_link_christoffel(THREE_LINK_DEFAULTS)
    np.testing.assert_allclose(christoffel_coriolis(three_link_model(), q, qd), c_ref(q, qd), atol=1e-7)


def test_skew_symmetry_at_reference_state():
    model = three_link_model()
    q, qd, h = np.zeros(3), np.array([1.0, 0.0, 0.0]), 1e-6
    d_dot = (model.mass_matrix(q + h * qd) - model.mass_matrix(q - h * qd)) / (2 * h)
    n_mat = d_dot - 2 * christoffel_coriolis(model, q, qd)
    assert np.abs(n_mat + n_mat.T).max() < 1e-6


@given(vec(3, angles))
def test_zero_velocity_gives_zero_coriolis(q):
    assert np.abs(christoffel_coriolis(three_link_model(), q, np.zeros(3))).max() == 0.0


def test_constant_nominal_has_zero_coriolis_and_derivatives():
    nom = furuta_nominal_constant()
    q = np.array([0.3, -0.2])
    assert np.abs(christoffel_coriolis(nom, q, np.array([1.0, 2.0]))).max() == 0.0
    assert np.abs(mass_matrix_derivatives(nom, q)).max() == 0.0


def test_furuta_mass_positive_definite_over_sweep():
    model = furuta_model()
    for q2 in np.linspace(-math.pi, math.pi, 100):
        d = model.mass_matrix(np.array([0.0, q2]))
        assert np.allclose(d, d.T)
        assert np.linalg.eigvalsh(d)[0] > 0


def test_energy_zero_at_rest_and_kinetic_quadratic():
    model = three_link_model()
    q = np.array([0.1, 0.4, -0.2])
    rest = State(np.zeros(3), np.zeros(3), 2)
    assert total_energy(model, rest) == 0.0
    qd = np.array([0.3, -0.5, 0.7])
    pot = model.potential(q)
    e1 = total_energy(model, State(q, qd, 2)) - pot
    e2 = total_energy(model, State(q, 2 * qd, 2)) - pot
    assert e2 == pytest.approx(4 * e1, rel=1e-12)


def test_gravity_is_potential_gradient():
    for model in (furuta_model(), three_link_model()):
        q = np.linspace(0.1, 0.5, model.dof)
        h = 1e-6
        grad = [(model.potential(q + h * e) - model.potential(q - h * e)) / (2 * h) for e in np.eye(model.dof)]
        np.testing.assert_allclose(model.gravity(q), grad, atol=1e-8)


def test_free_three_link_conserves_energy():
    from gpbalance.sim import TruePlant, rk4_step

    model = three_link_model()
    plant = TruePlant(model)
    # swinging about the hanging configuration keeps the motion bounded
    q, qd = np.array([0.0, math.pi / 2 + 0.3, math.pi / 2 - 0.2]), np.array([0.5, -0.3, 0.2])
    e0 = total_energy(model, State(q, qd, 2))
    u = np.zeros(2)
    for _ in range(2000):
        q, qd = rk4_step(plant, q, qd, u, 5e-4)
    assert abs(total_energy(model, State(q, qd, 2)) - e0) < 1e-6


def test_friction_removed_furuta_conserves_energy():
    from gpbalance.sim import TruePlant, rk4_step

    model = dataclasses.replace(furuta_model(), friction=_zero_forces)
    q, qd = np.array([0.0, 0.2]), np.array([0.3, -0.1])
    e0 = total_energy(model, State(q, qd, 1))
    for _ in range(1000):
        q, qd = rk4_step(TruePlant(model), q, qd, np.zeros(1), 1e-3)
    assert abs(total_energy(model, State(q, qd, 1)) - e0) < 1e-6


def test_bias_matches_components():
    model = three_link_model()
    q, qd = np.array([0.1, 0.2, 0.3]), np.array([0.4, -0.5, 0.6])
    np.testing.assert_allclose(model.bias(q, qd), christoffel_coriolis(model, q, qd) @ qd + model.gravity(q))


def test_parameter_validation():
    with pytest.raises(ModelParameterError):
        furuta_model({"mp": -1.0})
    with pytest.raises(ModelParameterError):
        three_link_model({"nope": 1.0})
    with pytest.raises(ModelParameterError):
        furuta_model({"dr": -0.1})
    with pytest.raises(ValueError):
        State(np.array([0.0, math.nan]), np.zeros(2), 1)
    assert set(FURUTA_DEFAULTS) == set(furuta_model().params)


def test_nominal_conditions():
    grid = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    res = check_nominal_conditions(three_link_nominal(), grid)
    assert res["c1"] and res["c2"] and res["c3"]
    res = check_nominal_conditions(furuta_nominal_varying(), grid[:, :2])
    assert res["c1"] and res["c2"] and res["c3"]


def test_exact_nominal_reproduces_plant():
    model = three_link_model()
    nom = nominal_from_robot(model)
    q, qd = np.array([0.1, 0.2, -0.1]), np.array([0.3, 0.1, -0.2])
    np.testing.assert_array_equal(nom.d_bar(q), model.mass_matrix(q))
    np.testing.assert_array_equal(nom.h_bar(q, qd), model.bias(q, qd))
