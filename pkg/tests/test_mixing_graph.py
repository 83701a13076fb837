"""Mixing matrices: construction, spectra, and the consensus constants.

The ring spectra are known in closed form (uniform weights give eigenvalues
(1 + 2 cos(2 pi j / n)) / 3), so those values are asserted exactly, and the
gamma/p formulas are pinned against independently computed fractions.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparqsim import (
    build_complete,
    build_custom,
    build_ring,
    consensus_params,
    spectral_info,
)


def test_ring_matrix_shape_and_weights():
    m = build_ring(5)
    assert m.n == 5
    assert m.W.shape == (5, 5)
    assert np.allclose(m.W.sum(axis=0), 1.0)
    assert np.allclose(m.W.sum(axis=1), 1.0)
    assert np.allclose(m.W, m.W.T)
    # each node: itself and two ring neighbours at weight 1/3
    assert m.W[0, 0] == pytest.approx(1 / 3)
    assert m.W[0, 1] == pytest.approx(1 / 3)
    assert m.W[0, 4] == pytest.approx(1 / 3)
    assert m.W[0, 2] == 0.0
    assert m.neighbors[0] == (1, 4)


def test_ring_metropolis_equals_uniform_on_regular_graph():
    # every ring node has degree 2, so metropolis weights are also 1/3
    assert np.allclose(build_ring(7, "metropolis").W, build_ring(7, "uniform").W)


def test_ring_rejects_tiny_n():
    with pytest.raises(ValueError):
        build_ring(2)


@pytest.mark.parametrize(
    "n,delta_expected",
    [
        (4, 2 / 3),
        (6, 1 / 3),
        (8, 1 - (1 + np.sqrt(2)) / 3),
    ],
)
def test_ring_spectral_gap_closed_form(n, delta_expected):
    info = spectral_info(build_ring(n))
    lam = np.array([(1 + 2 * np.cos(2 * np.pi * j / n)) / 3 for j in range(n)])
    assert info.delta == pytest.approx(delta_expected, abs=1e-12)
    assert info.beta == pytest.approx(float(np.max(1 - lam)), abs=1e-12)
    assert info.lambda2 == pytest.approx(1 - delta_expected, abs=1e-12)
    assert info.connected


def test_complete_graph_spectrum():
    info = spectral_info(build_complete(6))
    # W = J/n has eigenvalues {1, 0, ..., 0}
    assert info.lambda2 == pytest.approx(0.0, abs=1e-12)
    assert info.delta == pytest.approx(1.0, abs=1e-12)
    assert info.beta == pytest.approx(1.0, abs=1e-12)


def test_custom_path_graph_metropolis():
    m = build_custom(3, [(0, 1), (1, 2)], "metropolis")
    expected = np.array(
        [[2 / 3, 1 / 3, 0.0], [1 / 3, 1 / 3, 1 / 3], [0.0, 1 / 3, 2 / 3]]
    )
    assert np.allclose(m.W, expected)
    assert spectral_info(m).connected


def test_disconnected_graph_detected():
    m = build_custom(4, [(0, 1), (2, 3)])
    info = spectral_info(m)
    assert not info.connected
    assert info.delta == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError, match="connect"):
        consensus_params(info, omega=1.0)


def test_spectral_info_rejects_non_doubly_stochastic():
    bad = np.array([[0.5, 0.25], [0.25, 0.75]])
    with pytest.raises(ValueError):
        spectral_info(bad)


def test_single_node_graph():
    m = build_custom(1, [])
    assert m.W.shape == (1, 1) and m.W[0, 0] == 1.0
    info = spectral_info(m)
    assert info.connected and info.delta == 1.0


def test_gossip_contraction_matches_spectral_gap():
    # ||W^k - J||_2 = (1 - delta)^k exactly on a ring
    m = build_ring(6)
    delta = spectral_info(m).delta
    J = np.full((6, 6), 1 / 6)
    for k in (1, 2, 5):
        norm = np.linalg.norm(np.linalg.matrix_power(m.W, k) - J, 2)
        assert norm == pytest.approx((1 - delta) ** k, rel=1e-10)


def test_consensus_params_worked_example():
    # delta = beta = omega = 1 (complete graph, lossless compression):
    # gamma = 2 / (64 + 1 + 16 + 8 - 16) = 2/73 and p = gamma * delta / 8
    info = spectral_info(build_complete(4))
    cp = consensus_params(info, omega=1.0)
    assert cp.gamma == pytest.approx(2 / 73, rel=1e-12)
    assert cp.p == pytest.approx(1 / 292, rel=1e-12)


@pytest.mark.parametrize(
    "omega,gamma_expected,p_expected",
    [
        (0.05, 4.4784689e-04, 1.0930943e-05),
        (0.1, 8.9891440e-04, 2.1940494e-05),
        (0.2, 1.8108512e-03, 4.4198836e-05),
        (1.0, 9.6111984e-03, 2.3458790e-04),
    ],
)
def test_consensus_params_ring8_table(omega, gamma_expected, p_expected):
    cp = consensus_params(spectral_info(build_ring(8)), omega=omega)
    assert cp.gamma == pytest.approx(gamma_expected, rel=1e-6)
    assert cp.p == pytest.approx(p_expected, rel=1e-6)


def test_consensus_params_rejects_bad_omega():
    info = spectral_info(build_ring(4))
    for omega in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            consensus_params(info, omega=omega)


@given(
    st.floats(min_value=1e-6, max_value=1.0),
    st.floats(min_value=0.0, max_value=2.0),
    st.floats(min_value=1e-6, max_value=1.0),
)
@settings(max_examples=200, deadline=None)
def test_gamma_p_guarantees_over_domain(delta, beta, omega):
    # the closed form keeps gamma in (0, omega] and p above delta^2 omega / 644
    # for every spectrum a doubly stochastic matrix can produce
    gamma = 2 * delta * omega / (64 * delta + delta**2 + 16 * beta**2
                                 + 8 * delta * beta**2 - 16 * delta * omega)
    p = gamma * delta / 8
    assert 0 < gamma <= omega
    assert gamma >= 2 * delta * omega / 161 - 1e-18
    assert p >= delta**2 * omega / 644 - 1e-18


@pytest.mark.parametrize("n", [3, 4, 5, 8, 12])
@pytest.mark.parametrize("omega", [0.05, 0.5, 1.0])
def test_gamma_p_guarantees_on_real_rings(n, omega):
    info = spectral_info(build_ring(n))
    cp = consensus_params(info, omega)
    assert 0 < cp.gamma <= omega
    assert cp.p >= info.delta**2 * omega / 644


def test_neighbor_weights_view():
    m = build_ring(4)
    assert m.neighbor_weights(0) == [(1, pytest.approx(1 / 3)), (3, pytest.approx(1 / 3))]
