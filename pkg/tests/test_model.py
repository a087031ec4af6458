import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvcharge import model
from nvcharge.model import (E0, E1, EZ, G0, G1, GZ, S, PulseSequence, Segment,
                            build_four_level_matrix, build_rate_matrix, propagate,
                            pulse_pair, run_sequence)
from nvcharge.params import RateParameters, load_params, save_params, table1

from oracles import rk4_propagate

kinds = st.sampled_from(["green", "red", "dark"])
powers = st.floats(min_value=0.0, max_value=500.0)


@st.composite
def parameter_sets(draw):
    base = table1()
    scale = lambda: draw(st.floats(min_value=0.3, max_value=3.0))
    return base.replace(
        a=base.a * scale(), b=base.b * scale(), c=base.c * scale(),
        d=base.d * scale(), e=base.e * scale(), f=base.f * scale(),
        eta_inv=base.eta_inv * scale(), D_inv=base.D_inv * scale(),
        beta0=draw(st.floats(0.0, 1.0)), beta1=draw(st.floats(0.0, 1.0)),
        ionization_target=draw(st.sampled_from(["ground", "excited"])),
        is_scaling=draw(st.sampled_from(["linear", "quadratic"])),
    )


@st.composite
def states(draw):
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=7, max_size=7)))
    if w.sum() == 0:
        w[0] = 1.0
    return w / w.sum()


# build_rate_matrix

def test_dark_generator_columns_sum_to_zero(params):
    L = build_rate_matrix(params, "dark", 0.0)
    np.testing.assert_allclose(L.sum(axis=0), 0.0, atol=1e-15)


def test_green_without_switching_only_excites(params):
    p = params.replace(a=0.0, b=0.0, c=0.0)
    L = build_rate_matrix(p, "green", 120.0, relaxation=False)
    off = L - np.diag(np.diag(L))
    nz = {tuple(ix) for ix in np.argwhere(off != 0)}
    assert nz == {(E0, G0), (E1, G1)}


def test_green_ionization_to_excitation_ratio(params):
    L = build_rate_matrix(params, "green", 150.0)
    assert L[GZ, E0] / L[E0, G0] == pytest.approx(0.037, rel=1e-12)
    assert L[GZ, E1] / L[E1, G1] == pytest.approx(0.037, rel=1e-12)


def test_excited_ionization_target(params):
    p = params.replace(ionization_target="excited")
    L = build_rate_matrix(p, "green", 150.0, relaxation=False)
    assert L[GZ, E0] == 0.0
    assert L[EZ, E0] == pytest.approx(p.a * p.green_rate(150.0))


def test_red_singlet_ionization_at_reference_power(params):
    P = params.R0 / params.r_cal
    L = build_rate_matrix(params, "red", P, relaxation=False)
    assert L[GZ, S] == pytest.approx(params.Is_rate)
    q = params.replace(is_scaling="quadratic")
    L2 = build_rate_matrix(q, "red", 2 * P, relaxation=False)
    assert L2[GZ, S] == pytest.approx(4 * params.Is_rate)


def test_shelving_branching_is_exact(params):
    L = build_rate_matrix(params, "dark")
    assert L[S, E0] / (L[S, E0] + L[G0, E0]) == pytest.approx(params.beta0, rel=1e-14)
    assert L[S, E1] / (L[S, E1] + L[G1, E1]) == pytest.approx(params.beta1, rel=1e-14)
    assert -L[E0, E0] == pytest.approx(1 / 12.2)
    assert -L[E1, E1] == pytest.approx(1 / 6.0)


@pytest.mark.parametrize("kind,power", [("blue", 1.0), ("green", -1.0), ("mw_pi", 0.0)])
def test_build_rate_matrix_rejects_bad_input(params, kind, power):
    with pytest.raises(ValueError):
        build_rate_matrix(params, kind, power)


# propagate

def test_propagate_zero_time_is_identity(params):
    p = np.full(7, 1 / 7)
    L = build_rate_matrix(params, "green", 200.0)
    np.testing.assert_array_equal(propagate(p, L, 0.0), p)


def test_two_level_decay(params):
    p = params.replace(beta0=0.0)
    L = build_rate_matrix(p, "dark")
    out = propagate(model.pure_state("e_minus_0"), L, 12.2)
    assert out[E0] == pytest.approx(np.exp(-1.0), rel=1e-12)
    assert out[G0] == pytest.approx(1 - np.exp(-1.0), rel=1e-12)


def test_propagate_matches_fine_step_oracle(params):
    rng = np.random.default_rng(3)
    p0 = rng.dirichlet(np.ones(7))
    L = (build_rate_matrix(params, "green", 150.0) + build_rate_matrix(params, "red", 150.0)
         - build_rate_matrix(params, "dark"))
    ref = rk4_propagate(L, p0, 0.1, 1e-6)
    np.testing.assert_allclose(propagate(p0, L, 0.1), ref, atol=1e-9, rtol=0)


def test_negative_time_rejected(params):
    with pytest.raises(ValueError):
        propagate(model.pure_state(0), build_rate_matrix(params, "dark"), -1.0)


# run_sequence

def test_double_pi_pulse_is_identity(params):
    p = np.array([0.1, 0.2, 0.05, 0.15, 0.1, 0.3, 0.1])
    seq = PulseSequence([Segment("mw_pi"), Segment("mw_pi")])
    out = run_sequence(p, seq, params)
    np.testing.assert_array_equal(out[-1][1], p)
    assert [t for t, _ in out] == [0.0, 0.0, 0.0]


def test_pi_pulse_swaps_spin(params):
    out = run_sequence(model.pure_state("g_minus_0"), PulseSequence([Segment("mw_pi")]), params)
    np.testing.assert_array_equal(out[-1][1], model.pure_state("g_minus_1"))


def test_sequence_equals_composed_propagation(params):
    p0 = model.pure_state("g_minus_0")
    traj = run_sequence(p0, pulse_pair(150.0, 200.0), params)
    p = propagate(p0, build_rate_matrix(params, "green", 150.0), 0.1)
    p = propagate(p, build_rate_matrix(params, "dark"), 0.592)
    p = propagate(p, build_rate_matrix(params, "red", 200.0), 0.1)
    np.testing.assert_allclose(traj[-1][1], p, atol=1e-15)
    assert [t for t, _ in traj] == pytest.approx([0.0, 0.1, 0.692, 0.792])


def test_empty_sequence_returns_input(params):
    p = model.ground_state(0.7, 0.9)
    out = run_sequence(p, PulseSequence(), params)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0][1], p)


def test_spin_one_shelves_more(params):
    seq = PulseSequence([Segment("green", 100, 150.0), Segment("dark", 100_000)])
    s0 = run_sequence(model.pure_state("g_minus_0"), seq, params)[-1][1][S]
    s1 = run_sequence(model.pure_state("g_minus_1"), seq, params)[-1][1][S]
    assert s1 > s0 > 0


def test_sequence_json_roundtrip(tmp_path):
    seq = pulse_pair(95.0, 82.0)
    path = tmp_path / "seq.json"
    path.write_text(json.dumps(seq.to_dict()))
    assert PulseSequence.load(path) == seq


def test_segment_validation():
    with pytest.raises(ValueError):
        Segment("green", -1.0, 1.0)
    with pytest.raises(ValueError):
        Segment("uv", 1.0, 1.0)


# fluorescence

def test_fluorescence_of_ground_states_is_zero(params):
    assert model.fluorescence(model.ground_state(0.6, 0.9), params) == 0.0


def test_fluorescence_of_nv0_excited(params):
    p = params.replace(alpha_zero=1.0)
    assert model.fluorescence(model.pure_state("e_zero"), p) == 1.0


def test_fluorescence_saturates_with_green_power(params):
    p0 = model.ground_state(0.9125, 0.9)
    vals = [model.fluorescence(run_sequence(p0, [Segment("green", 100, P)], params)[-1][1], params)
            for P in (5, 20, 80, 160, 320, 640)]
    assert vals[0] < vals[1] < vals[2] < vals[3]
    # ionization eventually wins over excitation
    assert max(vals) < 1.0 * params.alpha_minus


# parameters

def test_params_json_roundtrip(tmp_path, params):
    path = tmp_path / "p.json"
    save_params(params, path)
    back = load_params(path)
    assert back == params
    assert back.errors == params.errors


@pytest.mark.parametrize("change", [dict(a=-0.1), dict(beta0=1.5), dict(g_cal=0.0),
                                    dict(ionization_target="nowhere"), dict(is_scaling="cubic")])
def test_params_validation(params, change):
    with pytest.raises(ValueError):
        params.replace(**change)


def test_params_rejects_unknown_fields(params):
    data = params.to_dict()
    data["zeta"] = 1.0
    with pytest.raises(ValueError):
        RateParameters.from_dict(data)


# invariants

@settings(max_examples=60, deadline=None)
@given(parameter_sets(), kinds, powers)
def test_generator_conserves_probability(p, kind, power):
    L = build_rate_matrix(p, kind, power)
    np.testing.assert_allclose(L.sum(axis=0), 0.0, atol=1e-12)
    off = L - np.diag(np.diag(L))
    assert np.all(off >= 0)


@settings(max_examples=60, deadline=None)
@given(parameter_sets(), kinds, powers, states(), st.floats(0.0, 1000.0))
def test_propagation_conserves_and_stays_positive(p, kind, power, p0, t):
    out = propagate(p0, build_rate_matrix(p, kind, power), t)
    assert abs(out.sum() - 1.0) < 1e-12
    assert out.min() > -1e-12


@settings(max_examples=40, deadline=None)
@given(parameter_sets(), st.sampled_from(["green", "red"]), st.floats(1.0, 400.0), st.floats(0.1, 5.0))
def test_generator_linear_in_power(p, kind, power, k):
    p = p.replace(is_scaling="linear")
    L1 = build_rate_matrix(p, kind, power, relaxation=False)
    Lk = build_rate_matrix(p, kind, k * power, relaxation=False)
    np.testing.assert_allclose(Lk, k * L1, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(parameter_sets(), kinds, powers, states(), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_semigroup(p, kind, power, p0, t1, t2):
    L = build_rate_matrix(p, kind, power)
    np.testing.assert_allclose(propagate(propagate(p0, L, t1), L, t2),
                               propagate(p0, L, t1 + t2), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(parameter_sets(), kinds, powers)
def test_ionization_is_spin_independent(p, kind, power):
    L = build_rate_matrix(p, kind, power, relaxation=False)
    for target in (GZ, EZ):
        assert L[target, E0] == L[target, E1]


@settings(max_examples=30, deadline=None)
@given(parameter_sets(), states(), st.floats(10.0, 300.0), st.floats(10.0, 300.0))
def test_excited_variant_matches_ground_for_instant_nv0_decay(p, p0, green, red):
    p = p.replace(eta_inv=1e-7)
    seq = pulse_pair(green, red)
    ground = run_sequence(p0, seq, p.replace(ionization_target="ground"))[-1][1]
    excited = run_sequence(p0, seq, p.replace(ionization_target="excited"))[-1][1]
    assert model.nv_zero_population(excited) == pytest.approx(model.nv_zero_population(ground), abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(parameter_sets(), kinds, powers, states(), st.floats(0.0, 2.0))
def test_four_level_reduction(p, kind, power, p0, t):
    p = p.replace(beta0=0.0, beta1=0.0, gamma1_inv=p.gamma0_inv)
    p0 = p0.copy()
    p0[S] = 0.0
    p0 /= p0.sum()
    full = propagate(p0, build_rate_matrix(p, kind, power), t)
    reduced = propagate(model.to_four_level(p0), build_four_level_matrix(p, kind, power), t)
    np.testing.assert_allclose(model.to_four_level(full), reduced, atol=1e-12)
