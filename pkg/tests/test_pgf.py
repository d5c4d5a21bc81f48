import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cri_series, decode_series, z_band
from treeaoi.pgf import (
    Pmf,
    PgfSampler,
    cri_length_pmf,
    cri_length_pmfs,
    decode_slot_pmf,
    decode_slot_pmfs,
    eval_cri_pgf,
    eval_decode_pgf,
    unresolved_prob,
    unresolved_probs,
)
from treeaoi.sim import replay_cri_batch


def _derivative_at_one(f, h=1e-5):
    # d/dz along the unit circle: f(e^{it}) ~ 1 + i t f'(1)
    return ((f(cmath.exp(1j * h)) - f(cmath.exp(-1j * h))) / (2j * h)).real


# ---------------------------------------------------------------- PGFs


@pytest.mark.parametrize("u", [0, 1])
def test_cri_pgf_base_cases(u):
    z = cmath.exp(0.7j)
    assert eval_cri_pgf(u, z) == pytest.approx(z)


def test_cri_pgf_two_users_closed_form():
    for t in np.linspace(0, 2 * np.pi, 17):
        z = cmath.exp(1j * t)
        assert eval_cri_pgf(2, z) == pytest.approx(z**3 / (2 - z**2), abs=1e-14)
    assert eval_cri_pgf(2, 1.0) == pytest.approx(1.0)
    assert _derivative_at_one(lambda z: eval_cri_pgf(2, z)) == pytest.approx(5.0, abs=1e-6)


def test_decode_pgf_values():
    z = cmath.exp(1.3j)
    assert eval_decode_pgf(1, z) == pytest.approx(z)
    assert eval_decode_pgf(2, 1.0) == pytest.approx(1.0)
    assert _derivative_at_one(lambda z: eval_decode_pgf(2, z)) == pytest.approx(4.0, abs=1e-6)


def test_off_circle_rejected():
    with pytest.raises(ValueError):
        eval_cri_pgf(3, 0.5)
    with pytest.raises(ValueError):
        PgfSampler([1.0 + 1e-9])


def test_pgf_matches_exact_series():
    terms = 60
    z = cmath.exp(0.4j)
    for u in (3, 5):
        series = sum(float(p) * z**n for n, p in enumerate(cri_series(u, terms)))
        assert eval_cri_pgf(u, z) == pytest.approx(series, abs=1e-6)


@pytest.mark.property
@settings(max_examples=40, deadline=None)
@given(t=st.floats(0, 2 * math.pi), u=st.integers(0, 100))
def test_pgf_bounded_on_unit_circle(t, u):
    s = PgfSampler([cmath.exp(1j * t), 1.0])
    lv, dv = s.cri(u), s.decode(max(u, 1))
    assert abs(lv[0]) <= 1 + 1e-9 and abs(dv[0]) <= 1 + 1e-9
    assert lv[1] == pytest.approx(1.0, abs=1e-9)
    assert dv[1] == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------- PMFs


@pytest.mark.parametrize("u", [0, 1])
def test_cri_pmf_trivial(u):
    p = cri_length_pmf(u, 10)
    assert p.support_min == 1 and p(1) == 1.0


def test_cri_pmf_two_users():
    p = cri_length_pmf(2, 32)
    assert p(1) == p(2) == 0
    assert p(3) == pytest.approx(0.5, abs=1e-12)
    assert p(4) == pytest.approx(0.0, abs=1e-12)
    assert p(5) == pytest.approx(0.25, abs=1e-12)
    assert cri_length_pmf(2, 200).mean() == pytest.approx(5.0, abs=1e-6)


def test_decode_pmf_one_other():
    p = decode_slot_pmf(1, 64)
    # slot 3 is reached by "other user first" (1/4) and by a repeated
    # collision followed by an immediate win (1/4 * 1/4)
    exact = decode_series(1, 8)
    assert float(exact[2]) == 0.25 and float(exact[3]) == 0.3125
    assert p(2) == pytest.approx(0.25, abs=1e-12)
    assert p(3) == pytest.approx(0.3125, abs=1e-12)
    assert decode_slot_pmf(1, 400).mean() == pytest.approx(4.0, abs=1e-6)
    assert decode_slot_pmf(0, 5).probs.tolist() == [1.0]


@pytest.mark.parametrize("u", [2, 3, 5, 8, 12])
def test_cri_pmf_matches_exact_series(u):
    cap = 40
    exact = np.array([float(x) for x in cri_series(u, cap)])[1:]
    got = cri_length_pmfs(u, cap)[u]
    np.testing.assert_allclose(got[: cap - 1], exact[: cap - 1], atol=1e-13)
    assert got[-1] == pytest.approx(1 - exact[: cap - 1].sum(), abs=1e-12)


@pytest.mark.parametrize("m", [1, 2, 4, 7])
def test_decode_pmf_matches_exact_series(m):
    cap = 30
    exact = np.array([float(x) for x in decode_series(m, cap)])[1:]
    got = decode_slot_pmfs(m, cap)[m]
    np.testing.assert_allclose(got[: cap - 1], exact[: cap - 1], atol=1e-13)


@pytest.mark.property
def test_pmf_rows_are_distributions():
    for mat in (cri_length_pmfs(100, 50), decode_slot_pmfs(99, 50), cri_length_pmfs(100, 700)):
        assert np.all(mat >= 0)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-9)


def test_mean_cri_length_increasing():
    s = np.arange(1, 1025)
    means = cri_length_pmfs(100, 1024) @ s
    assert np.all(np.diff(means[1:]) > 0)


@pytest.mark.parametrize("u", [2, 3, 5, 10])
def test_pmfs_match_isolated_cri_replays(u):
    n = 200_000
    lengths, decoded = replay_cri_batch(u, None, n, seed=u)
    cap = 400
    for emp_raw, pmf in (
        (np.bincount(lengths, minlength=cap + 1)[1 : cap + 1], cri_length_pmfs(u, cap)[u]),
        (np.bincount(decoded, minlength=cap + 1)[1 : cap + 1], decode_slot_pmfs(u - 1, cap)[u - 1]),
    ):
        emp = emp_raw / n
        se = np.sqrt(pmf * (1 - pmf) / n)
        mask = pmf > 1e-4
        band = z_band(int(mask.sum()))
        assert np.all(np.abs(emp - pmf)[mask] <= band * se[mask] + 1e-12)


def test_pmf_validation():
    with pytest.raises(ValueError):
        Pmf(0, np.array([1.0]))
    with pytest.raises(ValueError):
        Pmf(1, np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        Pmf(1, np.array([1.2, -0.2]))


# ---------------------------------------------------------------- phi


def test_unresolved_prob_examples():
    assert unresolved_prob(0, 1) == 0.0
    assert unresolved_prob(0, 7) == 0.0
    assert unresolved_prob(1, 2) == pytest.approx(0.75, abs=1e-12)
    assert unresolved_prob(10, 2000) < 1e-12


@pytest.mark.property
def test_unresolved_complements_decode_mass():
    for l_max in (2, 5, 10, 40):
        phi = unresolved_probs(30, l_max)
        head = decode_slot_pmfs(30, l_max + 1)[:, :l_max].sum(axis=1)
        np.testing.assert_allclose(head + phi, 1.0, atol=1e-9)
        assert np.all((0 <= phi) & (phi <= 1))
