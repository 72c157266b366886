"""Objective terms and their weighted combination.

Loss functions take and return :class:`~savae.autodiff.Tensor` objects so they can
be differentiated; call ``.item()`` for the float value.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError
from .networks import decode, variant_flags

PROB_EPS = 1e-7
RATIO_EPS = 1e-8
TERMS = ("adv", "var", "rec", "reg", "ratio", "sex")


@dataclass(frozen=True)
class LossWeights:
    """Trade-off coefficients.

    ``mu1..mu5`` weight the multimodal objective (adversarial, variational,
    reconstruction, regression, distance ratio); ``eta1..eta4`` the
    single-modality one (regression, reconstruction, adversarial, variational).
    ``sex_weight`` scales the sex-classification term of the multitask variant.
    """

    mu1: float = 0.1
    mu2: float = 0.01
    mu3: float = 1.0
    mu4: float = 1.0
    mu5: float = 0.1
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 0.1
    eta4: float = 0.01
    sex_weight: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {f.name} must be a non-negative number, got {value}")

    def coefficients(self, mode: str) -> dict[str, float]:
        """Term name -> coefficient for ``mode`` ("multimodal" or "unimodal")."""
        if mode == "multimodal":
            return {"adv": self.mu1, "var": self.mu2, "rec": self.mu3, "reg": self.mu4,
                    "ratio": self.mu5, "sex": self.sex_weight}
        if mode == "unimodal":
            return {"reg": self.eta1, "rec": self.eta2, "adv": self.eta3, "var": self.eta4,
                    "sex": self.sex_weight}
        raise ConfigError(f"unknown mode {mode!r}")

    def any_positive(self, mode: str) -> bool:
        return any(c > 0 for c in self.coefficients(mode).values())

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def active_terms(variant: str, mode: str) -> tuple[str, ...]:
    """Loss terms a variant optimizes: AE uses rec+reg, AAE adds adv, VAE adds var, ..."""
    flags = variant_flags(variant)
    terms = ["rec", "reg"]
    if flags.adversarial:
        terms.append("adv")
    if flags.variational:
        terms.append("var")
    if flags.ratio and mode == "multimodal":
        terms.append("ratio")
    if flags.sex_head:
        terms.append("sex")
    return tuple(t for t in TERMS if t in terms)


@dataclass
class LossBreakdown:
    """Unweighted term values, the weighted total and the discriminator's own loss."""

    adv: float = 0.0
    var: float = 0.0
    rec: float = 0.0
    reg: float = 0.0
    ratio: float = 0.0
    sex: float = 0.0
    total: float = 0.0
    disc_loss: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# individual terms


def _check_probs(p: Tensor, name: str):
    v = p.value
    if not np.all((v >= 0.0) & (v <= 1.0)):
        raise DomainError(f"{name}: discriminator outputs must lie in [0, 1]")


def _safe_log(p: Tensor) -> Tensor:
    return ad.log(ad.clip(p, PROB_EPS, 1.0 - PROB_EPS))


def adversarial_losses(disc_on_fake: Tensor, disc_on_prior: Tensor | None = None):
    """Return ``(gen_loss, disc_loss)`` for one modality.

    ``disc_loss = -mean log D(prior) - mean log(1 - D(fake))`` is what the
    discriminator minimizes. ``gen_loss = -mean log D(fake)`` is the
    non-saturating encoder objective. ``disc_loss`` is ``None`` when no prior
    samples are given.
    """
    _check_probs(disc_on_fake, "adversarial_losses")
    gen = -ad.mean(_safe_log(disc_on_fake))
    if disc_on_prior is None:
        return gen, None
    _check_probs(disc_on_prior, "adversarial_losses")
    disc = -ad.mean(_safe_log(disc_on_prior)) - ad.mean(_safe_log(1.0 - disc_on_fake))
    return gen, disc


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_gaussian: mu {mu.shape} vs logvar {logvar.shape}")
    per_elem = ad.square(mu) + ad.exp(logvar) - 1.0 - logvar
    return ad.sum(per_elem) * (0.5 / mu.shape[0])


def ratio_terms(s1: Tensor, s2: Tensor, d1: Tensor, d2: Tensor) -> tuple[Tensor, Tensor]:
    """Batch-mean L2 distance between shared codes and between distinct codes."""
    if s1.shape != s2.shape or d1.shape != d2.shape:
        raise ShapeError("ratio_loss: paired codes must have equal shapes")
    num = ad.mean(ad.row_norm(s1 - s2))
    den = ad.mean(ad.row_norm(d1 - d2))
    return num, den


def ratio_loss(s1: Tensor, s2: Tensor, d1: Tensor, d2: Tensor, eps: float = RATIO_EPS) -> Tensor:
    """Shared-code distance over distinct-code distance; ``eps`` guards a zero denominator."""
    num, den = ratio_terms(s1, s2, d1, d2)
    return num / (den + eps)


def _squared_error(x: Tensor, x_hat: Tensor) -> Tensor:
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} does not match input {x.shape}")
    return ad.sum(ad.square(x - x_hat)) * (1.0 / x.shape[0])


class LatentCode(NamedTuple):
    shared: Tensor
    distinct: Tensor


def cross_recon_loss(x1: Tensor, x2: Tensor | None, dec1, dec2, code1: LatentCode,
                     code2: LatentCode | None, dropout: float = 0.0, rng=None) -> Tensor:
    """Rebuild each modality from the other modality's shared code and its own distinct code.

    Per-sample squared error summed over features, averaged over the batch, summed
    over both modalities.
    """
    if x2 is None or code2 is None or dec2 is None:
        raise ConfigError("cross reconstruction needs both modalities; use self_recon_loss for one")
    r1 = decode(dec1, code2.shared, code1.distinct, dropout, rng)
    r2 = decode(dec2, code1.shared, code2.distinct, dropout, rng)
    return _squared_error(x1, r1) + _squared_error(x2, r2)


def self_recon_loss(x: Tensor, dec, code: LatentCode, dropout: float = 0.0, rng=None) -> Tensor:
    """Rebuild a modality from its own shared and distinct codes."""
    return _squared_error(x, decode(dec, code.shared, code.distinct, dropout, rng))


def regression_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean squared error in years squared."""
    if y.shape != y_hat.shape or y.shape[1] != 1:
        raise ShapeError(f"regression_loss: expected matching batch x 1 shapes, got {y.shape}, {y_hat.shape}")
    return ad.mean(ad.square(y - y_hat))


def binary_cross_entropy(p: Tensor, target: Tensor) -> Tensor:
    _check_probs(p, "binary_cross_entropy")
    return -ad.mean(target * _safe_log(p) + (1.0 - target) * _safe_log(1.0 - p))


# ---------------------------------------------------------------------------
# combination


def _coefficients(weights: LossWeights, mode: str, parts: Mapping) -> dict[str, float]:
    coeffs = weights.coefficients(mode)
    for k, c in coeffs.items():
        if c < 0:
            raise ConfigError(f"negative weight for {k}")
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}")
    if mode == "unimodal" and parts.get("ratio") is not None:
        raise ConfigError("the distance ratio term does not exist for a single modality")
    return coeffs


def weighted_total(parts: Mapping[str, Tensor | float | None], weights: LossWeights, mode: str):
    """Differentiable weighted sum; ``None`` parts and zero weights are skipped."""
    coeffs = _coefficients(weights, mode, parts)
    total = 0.0
    for term in TERMS:
        value = parts.get(term)
        c = coeffs.get(term, 0.0)
        if value is None or c == 0.0:
            continue
        total = total + c * value
    return total


def total_loss(parts: Mapping[str, Tensor | float | None], weights: LossWeights,
               mode: str = "multimodal", disc_loss: float = 0.0) -> LossBreakdown:
    """Breakdown with unweighted term values and their weighted total."""
    coeffs = _coefficients(weights, mode, parts)
    values = {}
    for term in TERMS:
        v = parts.get(term)
        if v is None:
            values[term] = 0.0
        else:
            values[term] = v.item() if isinstance(v, Tensor) else float(v)
    total = 0.0
    for term in TERMS:
        total += coeffs.get(term, 0.0) * values[term]
    return LossBreakdown(total=total, disc_loss=float(disc_loss), **values)
