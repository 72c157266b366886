import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from savae.autodiff import Tape
from savae.errors import ConfigError, DomainError, ShapeError
from savae.losses import (
    LatentCode,
    LossWeights,
    TERMS,
    active_terms,
    adversarial_losses,
    binary_cross_entropy,
    cross_recon_loss,
    kl_gaussian,
    ratio_loss,
    regression_loss,
    self_recon_loss,
    total_loss,
    weighted_total,
)
from savae.networks import Architecture, MlpParams, init_params

TOL = 1e-9


_TAPE = Tape()


def c(x):
    return _TAPE.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))


# adversarial ---------------------------------------------------------------


def test_adversarial_at_chance():
    gen, disc = adversarial_losses(c(np.full((4, 1), 0.5)), c(np.full((4, 1), 0.5)))
    assert disc.item() == pytest.approx(2 * math.log(2), abs=TOL)
    assert gen.item() == pytest.approx(math.log(2), abs=TOL)


def test_perfect_discriminator_has_near_zero_loss():
    _, disc = adversarial_losses(c([[1e-12]]), c([[1.0]]))
    assert disc.item() < 1e-6


def test_adversarial_without_prior_returns_none():
    gen, disc = adversarial_losses(c([[0.25]]))
    assert disc is None
    assert gen.item() == pytest.approx(-math.log(0.25), abs=TOL)


def test_adversarial_rejects_out_of_range():
    with pytest.raises(DomainError):
        adversarial_losses(c([[1.2]]))


# KL ------------------------------------------------------------------------


@pytest.mark.parametrize("mu, logvar, expected", [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.5),
    (0.0, math.log(4.0), 0.5 * (4 - 1 - math.log(4))),
])
def test_kl_examples(mu, logvar, expected):
    assert kl_gaussian(c([[mu]]), c([[logvar]])).item() == pytest.approx(expected, abs=TOL)


def test_kl_sums_dims_and_averages_batch():
    mu = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert kl_gaussian(c(mu), c(np.zeros_like(mu))).item() == pytest.approx(0.25, abs=TOL)


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_gaussian(c(np.zeros((2, 3))), c(np.zeros((2, 2))))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6))
def test_kl_non_negative(pairs):
    mu = np.array([[p[0] for p in pairs]])
    lv = np.array([[p[1] for p in pairs]])
    assert kl_gaussian(c(mu), c(lv)).item() >= -1e-12


# distance ratio ------------------------------------------------------------


def test_ratio_hand_example():
    assert ratio_loss(c([[1, 0]]), c([[0, 0]]), c([[0, 0]]), c([[3, 4]])).item() == pytest.approx(0.2, abs=TOL)


def test_ratio_zero_when_shared_codes_agree():
    s = np.random.default_rng(0).standard_normal((5, 3))
    d1, d2 = np.zeros((5, 2)), np.ones((5, 2))
    assert ratio_loss(c(s), c(s), c(d1), c(d2)).item() == 0.0


def test_ratio_degenerate_denominator_is_finite_and_large():
    d = np.ones((2, 2))
    value = ratio_loss(c([[1, 0], [1, 0]]), c([[0, 0], [0, 0]]), c(d), c(d)).item()
    assert np.isfinite(value) and value > 1e6


def test_ratio_shape_mismatch():
    with pytest.raises(ShapeError):
        ratio_loss(c(np.zeros((2, 3))), c(np.zeros((2, 2))), c(np.zeros((2, 1))), c(np.ones((2, 1))))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10), st.floats(1.01, 5))
def test_ratio_grows_with_shared_distance(gap, factor):
    d1, d2 = c([[0.0, 0.0]]), c([[1.0, 2.0]])
    near = ratio_loss(c([[gap, 0.0]]), c([[0.0, 0.0]]), d1, d2).item()
    far = ratio_loss(c([[gap * factor, 0.0]]), c([[0.0, 0.0]]), d1, d2).item()
    assert far > near


# reconstruction ------------------------------------------------------------


def _identity_decoder(width: int, sd: int) -> MlpParams:
    """Linear decoder that copies the shared code (first ``width`` latent columns)."""
    arch = Architecture(m1=width, m2=width, shared_dim=sd, dist_dim=2, dec_hidden=())
    dec = init_params(arch, 0).dec1
    W = np.zeros((width, sd + 2))  # weights are stored out x in
    W[:width, :width] = np.eye(width)
    return MlpParams(dec.specs, [W], [np.zeros((1, width))])


def test_cross_recon_perfect_is_zero_and_offset_gives_m():
    m = 4
    x = np.arange(m, dtype=float)[None, :]
    dec = _identity_decoder(m, m)
    code = LatentCode(c(x), c(np.zeros((1, 2))))
    assert cross_recon_loss(c(x), c(x), dec, dec, code, code).item() == 0.0
    # the decoders return x, the targets are x + 1 -> m per modality
    assert cross_recon_loss(c(x + 1), c(x + 1), dec, dec, code, code).item() == pytest.approx(2 * m, abs=TOL)
    assert self_recon_loss(c(x + 1), dec, code).item() == pytest.approx(m, abs=TOL)


def test_zero_decoder_self_recon_is_mean_squared_norm():
    rng = np.random.default_rng(3)
    m = 32
    x = rng.standard_normal((500, m))
    x = (x - x.mean(0)) / x.std(0)
    dec = init_params(Architecture(m1=m, m2=m), 0).dec1
    zero = MlpParams(dec.specs, [np.zeros_like(w) for w in dec.weights], [np.zeros_like(b) for b in dec.biases])
    code = LatentCode(c(np.zeros((500, 50))), c(np.zeros((500, 70))))
    value = self_recon_loss(c(x), zero, code).item()
    assert value == pytest.approx(np.mean(np.sum(x**2, axis=1)), abs=TOL)
    assert value == pytest.approx(m, abs=TOL)


def test_self_recon_equals_cross_recon_for_identical_modalities():
    rng = np.random.default_rng(4)
    b = init_params(Architecture(m1=6, m2=6), 0)
    x = rng.standard_normal((3, 6))
    code = LatentCode(c(rng.standard_normal((3, 50))), c(rng.standard_normal((3, 70))))
    cross = cross_recon_loss(c(x), c(x), b.dec1, b.dec1, code, code).item()
    assert cross == pytest.approx(2 * self_recon_loss(c(x), b.dec1, code).item(), abs=TOL)


def test_cross_recon_needs_both_modalities():
    b = init_params(Architecture(m1=3, m2=3), 0)
    code = LatentCode(c(np.zeros((1, 50))), c(np.zeros((1, 70))))
    with pytest.raises(ConfigError):
        cross_recon_loss(c(np.zeros((1, 3))), None, b.dec1, b.dec2, code, None)


def test_recon_shape_mismatch():
    b = init_params(Architecture(m1=3, m2=3), 0)
    code = LatentCode(c(np.zeros((1, 50))), c(np.zeros((1, 70))))
    with pytest.raises(ShapeError):
        self_recon_loss(c(np.zeros((1, 4))), b.dec1, code)


# regression ----------------------------------------------------------------


def test_regression_examples():
    assert regression_loss(c([[30.0]]), c([[32.0]])).item() == pytest.approx(4.0, abs=TOL)
    assert regression_loss(c([[30.0]]), c([[30.0]])).item() == 0.0
    assert regression_loss(c([[30.0], [40.0]]), c([[32.0], [38.0]])).item() == pytest.approx(4.0, abs=TOL)


def test_regression_shape_checks():
    with pytest.raises(ShapeError):
        regression_loss(c([[1.0, 2.0]]), c([[1.0, 2.0]]))


def test_binary_cross_entropy_at_half():
    assert binary_cross_entropy(c([[0.5], [0.5]]), c([[0.0], [1.0]])).item() == pytest.approx(math.log(2), abs=TOL)


# combination ---------------------------------------------------------------


def _parts(rng):
    return {t: float(rng.uniform(0.1, 5.0)) for t in TERMS}


def test_one_hot_weight_selects_regression():
    parts = _parts(np.random.default_rng(0))
    w = LossWeights(mu1=0, mu2=0, mu3=0, mu4=1, mu5=0, sex_weight=0)
    assert total_loss(parts, w).total == pytest.approx(parts["reg"], abs=TOL)


def test_all_zero_weights_give_zero():
    parts = _parts(np.random.default_rng(1))
    w = LossWeights(mu1=0, mu2=0, mu3=0, mu4=0, mu5=0, sex_weight=0)
    assert total_loss(parts, w).total == 0.0


def test_unimodal_reduction():
    parts = _parts(np.random.default_rng(2))
    parts.pop("ratio")
    w = LossWeights(eta1=0.7, eta2=1.3, eta3=0.0, eta4=0.0, sex_weight=0)
    assert total_loss(parts, w, "unimodal").total == pytest.approx(0.7 * parts["reg"] + 1.3 * parts["rec"], abs=TOL)


def test_unimodal_rejects_ratio_term():
    with pytest.raises(ConfigError):
        total_loss({"ratio": 1.0}, LossWeights(), "unimodal")


def test_unknown_term_and_bad_weights():
    with pytest.raises(ConfigError):
        total_loss({"bogus": 1.0}, LossWeights())
    with pytest.raises(ConfigError):
        LossWeights(mu1=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(mu1=float("nan"))


def test_none_parts_are_skipped():
    assert total_loss({"reg": 2.0, "adv": None}, LossWeights()).total == pytest.approx(2.0, abs=TOL)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_total_linear_in_each_multimodal_weight(k):
    rng = np.random.default_rng(k)
    for _ in range(20):
        parts = _parts(rng)
        base = {f"mu{i}": float(rng.uniform(0, 2)) for i in range(1, 6)}
        a, b = rng.uniform(0, 3, size=2)
        f = lambda v: total_loss(parts, LossWeights(**{**base, f"mu{k}": v})).total
        # affine in mu_k: f(a + b) - f(a) == f(b) - f(0)
        assert f(a + b) - f(a) == pytest.approx(f(b) - f(0.0), abs=1e-9)


def test_weighted_total_matches_breakdown():
    tape = Tape()
    rng = np.random.default_rng(7)
    parts = {t: tape.constant([[v]]) for t, v in _parts(rng).items()}
    w = LossWeights(mu1=0.3, mu2=0.2, mu3=1.1, mu4=0.9, mu5=0.4, sex_weight=0.5)
    assert weighted_total(parts, w, "multimodal").item() == pytest.approx(total_loss(parts, w).total, abs=TOL)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))))
def test_term_order_does_not_matter(order):
    values = _parts(np.random.default_rng(11))
    shuffled = {TERMS[i]: values[TERMS[i]] for i in order}
    assert total_loss(shuffled, LossWeights()).total == total_loss(values, LossWeights()).total


def test_variant_gating():
    assert active_terms("AE", "multimodal") == ("rec", "reg")
    assert active_terms("AAE", "multimodal") == ("adv", "rec", "reg")
    assert active_terms("VAE", "multimodal") == ("var", "rec", "reg")
    assert active_terms("AVAE", "multimodal") == ("adv", "var", "rec", "reg", "ratio")
    assert active_terms("SA-AVAE", "multimodal") == ("adv", "var", "rec", "reg", "ratio")
    assert active_terms("SA-AVAE", "unimodal") == ("adv", "var", "rec", "reg")
    assert "sex" in active_terms("M-AVAE", "multimodal")
    with pytest.raises(ConfigError):
        active_terms("XYZ", "multimodal")
