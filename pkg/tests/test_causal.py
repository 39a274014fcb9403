import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iernlab import causal
from iernlab.errors import ContractError, FormatError, UndefinedConditionalError


def _shared_y(p_d, p_x_given_d, p_y_row):
    n_c, n_x = np.shape(p_x_given_d)
    return causal.DiscreteSCM(p_d, p_x_given_d, np.broadcast_to(p_y_row, (n_x, n_c, len(p_y_row))))


def test_validation():
    with pytest.raises(ContractError):
        causal.DiscreteSCM([0.5, 0.6], [[1, 0], [0, 1]], np.full((2, 2, 2), 0.5))
    with pytest.raises(ContractError):
        causal.DiscreteSCM([0.5, 0.5], [[1, 0]], np.full((2, 2, 2), 0.5))
    with pytest.raises(ContractError):
        causal.backdoor(causal.simpson_fixture(), 2)


def test_y_independent_of_d():
    scm = _shared_y([0.2, 0.8], [[0.9, 0.1], [0.3, 0.7]], [0.25, 0.75])
    for x in range(2):
        assert np.allclose(causal.conditional(scm, x), [0.25, 0.75], atol=1e-15)
        assert np.allclose(causal.backdoor(scm, x), causal.conditional(scm, x), atol=1e-15)


def test_point_mass_posterior():
    p_y = np.array([[[0.1, 0.9], [0.6, 0.4]], [[0.5, 0.5], [0.2, 0.8]]])
    scm = causal.DiscreteSCM([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]], p_y)
    assert np.allclose(causal.conditional(scm, 0), p_y[0, 0])
    assert np.allclose(causal.conditional(scm, 1), p_y[1, 1])


def test_zero_probability_x():
    scm = causal.DiscreteSCM([0.5, 0.5], [[1.0, 0.0], [1.0, 0.0]], np.full((2, 2, 2), 0.5))
    with pytest.raises(UndefinedConditionalError):
        causal.conditional(scm, 1)
    assert np.allclose(causal.backdoor(scm, 1), [0.5, 0.5])  # backdoor stays defined


def test_uniform_prior_averages_strata():
    rng = np.random.default_rng(3)
    scm = causal.random_scm(rng, 4, 3, 5)
    scm = causal.DiscreteSCM(np.full(4, 0.25), scm.p_x_given_d, scm.p_y_given_xd)
    for x in range(3):
        assert np.allclose(causal.backdoor(scm, x), scm.p_y_given_xd[x].mean(axis=0), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_enumeration(seed):
    scm = causal.random_scm(np.random.default_rng(seed), 3, 3, 2)
    for x in range(3):
        assert np.max(np.abs(causal.conditional(scm, x) - causal.enumerate_conditional(scm, x))) < 1e-12
        b = causal.backdoor(scm, x)
        assert np.max(np.abs(b - causal.enumerate_backdoor(scm, x))) < 1e-12
        assert (b >= 0).all() and abs(b.sum() - 1) < 1e-12


def test_x_independent_of_d_gives_equal_answers():
    rng = np.random.default_rng(8)
    base = causal.random_scm(rng, 3, 4, 3)
    row = rng.dirichlet(np.ones(4))
    scm = causal.DiscreteSCM(base.p_d, np.tile(row, (3, 1)), base.p_y_given_xd)
    for x in range(4):
        assert np.allclose(causal.conditional(scm, x), causal.backdoor(scm, x), atol=1e-14)


# --- Simpson fixture -----------------------------------------------------------------


def test_pinned_fixture_is_the_search_result():
    pinned = causal.simpson_fixture()
    found = causal.find_simpson()
    for name in ("p_d", "p_x_given_d", "p_y_given_xd"):
        assert np.array_equal(getattr(pinned, name), getattr(found, name))


def test_simpson_reversal():
    scm = causal.simpson_fixture()
    c, b = causal.conditional(scm, 0), causal.backdoor(scm, 0)
    assert np.argmax(c) != np.argmax(b)
    assert causal.reversal_margin(scm, 0) >= 0.05
    assert np.allclose(c, [0.4375, 0.5625], atol=1e-12)
    assert np.allclose(b, [0.64, 0.36], atol=1e-12)


def test_sampling_follows_backdoor_not_conditional():
    scm = causal.simpson_fixture()
    n = 200_000
    emp = causal.sample_do(scm, 0, n, np.random.default_rng(0))
    b, c = causal.backdoor(scm, 0), causal.conditional(scm, 0)
    sigma = np.sqrt(b * (1 - b) / n)
    assert (np.abs(emp - b) <= 4 * sigma).all()
    assert (np.abs(emp - c) > 4 * sigma).any()


# --- sampling --------------------------------------------------------------------------


def test_deterministic_scm_sampling_is_exact():
    p_y = np.zeros((2, 2, 3))
    p_y[:, :, 1] = 1.0
    scm = causal.DiscreteSCM([1.0, 0.0], [[0.0, 1.0], [1.0, 0.0]], p_y)
    for n in (1, 7, 100):
        assert np.array_equal(causal.sample_do(scm, 1, n, np.random.default_rng(n)), [0.0, 1.0, 0.0])


def test_point_mass_prior_samples_that_stratum():
    p_y = np.array([[[0.3, 0.7], [0.9, 0.1]], [[0.5, 0.5], [0.5, 0.5]]])
    scm = causal.DiscreteSCM([0.0, 1.0], [[0.5, 0.5], [0.5, 0.5]], p_y)
    emp = causal.sample_do(scm, 0, 100_000, np.random.default_rng(1))
    assert np.abs(emp - p_y[0, 1]).max() < 4 * np.sqrt(0.09 / 100_000)
    with pytest.raises(ContractError):
        causal.sample_do(scm, 0, 0, np.random.default_rng(1))


# --- fixture files -----------------------------------------------------------------------


def test_scm_file_round_trip(tmp_path):
    scm = causal.random_scm(np.random.default_rng(4), 2, 3, 2)
    back = causal.load_scm(causal.save_scm(scm, tmp_path / "s.json"))
    assert np.array_equal(back.p_y_given_xd, scm.p_y_given_xd)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        causal.load_scm(tmp_path / "bad.json")
