"""Finite-difference verification of the complete training objective.

The numeric side only evaluates forward passes, so it is independent of the
reverse sweep being checked.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .losses import LossWeights
from .networks import Architecture, ModelBundle, init_params
from .training import Batch, StepSettings, _bind_group, discriminator_objective, generator_objective

TINY_ARCH = dict(shared_dim=3, dist_dim=4, enc_hidden=(8,), dec_hidden=(8,), disc_hidden=(5,),
                 reg_hidden=(6,), sex_hidden=(4,))


def tiny_problem(seed: int, variant: str = "SA-AVAE", batch: int = 4, m1: int = 6, m2: int | None = 6):
    """A small random model plus a fixed batch and fixed noise draws."""
    rng = np.random.default_rng(seed)
    arch = Architecture(m1=m1, m2=m2, variant=variant, **TINY_ARCH)
    bundle = init_params(arch, seed)
    for p in bundle.parameters().values():
        # move off the zero-bias init so every bias gradient is exercised
        p += 0.3 * rng.standard_normal(p.shape)
    bundle.age_offset, bundle.age_scale = 40.0, 5.0
    b = Batch(
        rng.standard_normal((batch, m1)),
        None if m2 is None else rng.standard_normal((batch, m2)),
        rng.integers(0, 2, size=(batch, 1)).astype(np.float64),
        40.0 + 5.0 * rng.standard_normal((batch, 1)),
    )
    noise = {"dist1": rng.standard_normal((batch, arch.dist_dim)),
             "dist2": rng.standard_normal((batch, arch.dist_dim))}
    prior = {"enc1": rng.standard_normal((batch, arch.shared_dim)),
             "enc2": rng.standard_normal((batch, arch.shared_dim))}
    return bundle, b, noise, prior


def _objective(bundle, batch, settings, noise, prior, which):
    tape = Tape()
    bound = _bind_group(bundle, tape, set(bundle.nets))
    if which == "generator":
        total, _ = generator_objective(bundle, bound, batch, settings, None, noise)
    else:
        total = discriminator_objective(bundle, bound, batch, settings, None, prior)
    return tape, bound, total


def objective_gradcheck(bundle: ModelBundle, batch: Batch, noise, prior,
                        weights: LossWeights | None = None, which: str = "generator",
                        step: float = 1e-5, per_tensor: int | None = None,
                        rng: np.random.Generator | None = None) -> float:
    """Max relative error of autodiff vs central differences for one objective.

    ``which`` is ``"generator"`` (all parameters) or ``"discriminator"``
    (discriminator parameters only; encoder codes are detached there). With
    ``per_tensor`` only that many random coordinates of each parameter array
    are checked; otherwise every coordinate is.
    """
    settings = StepSettings(weights or LossWeights())
    _tape, bound, total = _objective(bundle, batch, settings, noise, prior, which)
    grads = ad.backward(total)
    params = bundle.parameters()
    analytic = {}
    for name, b in bound.items():
        for i, (w, bb) in enumerate(zip(b.weights, b.biases)):
            analytic[f"{name}.W{i}"] = grads[w]
            analytic[f"{name}.b{i}"] = grads[bb]
    names = sorted(params) if which == "generator" else [k for k in sorted(params) if k.startswith("disc.")]

    def value():
        return _objective(bundle, batch, settings, noise, prior, which)[2].item()

    worst = 0.0
    for name in names:
        p = params[name]
        coords = list(np.ndindex(*p.shape))
        if per_tensor is not None and per_tensor < len(coords):
            pick = (rng or np.random.default_rng(0)).choice(len(coords), per_tensor, replace=False)
            coords = [coords[i] for i in pick]
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + step
            f_plus = value()
            p[idx] = orig - step
            f_minus = value()
            p[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def run_gradcheck_suite(seed: int = 0, n_points: int = 100, per_tensor: int = 2,
                        variant: str = "SA-AVAE", step: float = 1e-5) -> dict:
    """Check the full objective at ``n_points`` random parameter points.

    Each point draws fresh parameters, batch and noise; the discriminator
    objective is checked alongside the encoder/decoder/regressor one.
    """
    rng = np.random.default_rng(seed)
    worst_gen = worst_disc = 0.0
    for k in range(n_points):
        bundle, batch, noise, prior = tiny_problem(int(rng.integers(2**31)), variant)
        worst_gen = max(worst_gen, objective_gradcheck(bundle, batch, noise, prior, which="generator",
                                                       step=step, per_tensor=per_tensor, rng=rng))
        worst_disc = max(worst_disc, objective_gradcheck(bundle, batch, noise, prior, which="discriminator",
                                                         step=step, per_tensor=per_tensor, rng=rng))
    return {"points": n_points, "max_rel_err": max(worst_gen, worst_disc),
            "generator": worst_gen, "discriminator": worst_disc}
