"""Optimization: Adam, the two-phase adversarial step, plateau scheduling and k-fold splits."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import Dataset, stratified_split
from .errors import ConfigError, DataError, TrainingError
from .losses import (
    LatentCode,
    LossBreakdown,
    LossWeights,
    active_terms,
    adversarial_losses,
    binary_cross_entropy,
    cross_recon_loss,
    kl_gaussian,
    ratio_terms,
    regression_loss,
    self_recon_loss,
    total_loss,
    weighted_total,
    RATIO_EPS,
)
from .networks import (
    Architecture,
    ModelBundle,
    assemble_M,
    bind,
    discriminate,
    encode,
    init_params,
    mlp_forward,
    predict,
    regress,
    reparameterize,
    variant_flags,
)

log = logging.getLogger(__name__)

GENERATOR_NETS = ("enc1", "enc2", "dec1", "dec2", "reg", "sex_head")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def _decays(name: str) -> bool:
    # only weight matrices are decayed, biases are not
    return ".b" not in name


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place, preceded by decoupled weight decay.

    Returns ``(params, state)`` for convenience.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} (step {state.t + 1})")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    # m_hat / (sqrt(v_hat) + eps) == (sqrt(c2) / c1) * m / (sqrt(v) + eps * sqrt(c2))
    step = lr * np.sqrt(c2) / c1
    eps_hat = state.eps * np.sqrt(c2)
    for name, g in grads.items():
        p = params[name]
        if weight_decay and _decays(name):
            p *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        tmp = np.multiply(g, g)
        tmp *= 1.0 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += eps_hat
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp
    return params, state


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    lr: float = 1e-3
    lr_patience: int = 9
    lr_factor: float = 0.25
    early_stop_patience: int = 18
    max_epochs: int = 200
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "SA-AVAE"
    mode: str = "multimodal"
    val_fraction: float = 0.15
    dropout: float = 0.1
    weight_decay: float = 1e-5
    self_recon: bool = False
    restore_best: bool = True
    shared_dim: int = 50
    dist_dim: int = 70
    enc_hidden: tuple[int, ...] = (256, 128)
    dec_hidden: tuple[int, ...] = (128, 256)
    disc_hidden: tuple[int, ...] = (64, 32)
    reg_hidden: tuple[int, ...] = (128, 64)
    sex_hidden: tuple[int, ...] = (64,)

    def validate(self) -> "TrainConfig":
        variant_flags(self.variant)
        if self.mode not in ("multimodal", "unimodal"):
            raise ConfigError(f"mode must be multimodal or unimodal, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be at least 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not self.weights.any_positive(self.mode):
            raise ConfigError("at least one loss weight must be positive")
        return self

    def architecture(self, m1: int, m2: int | None) -> Architecture:
        return Architecture(
            m1=m1,
            m2=None if self.mode == "unimodal" else m2,
            variant=self.variant,
            shared_dim=self.shared_dim,
            dist_dim=self.dist_dim,
            enc_hidden=tuple(self.enc_hidden),
            dec_hidden=tuple(self.dec_hidden),
            disc_hidden=tuple(self.disc_hidden),
            reg_hidden=tuple(self.reg_hidden),
            sex_hidden=tuple(self.sex_hidden),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        for k in ("enc_hidden", "dec_hidden", "disc_hidden", "reg_hidden", "sex_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        for k in ("enc_hidden", "dec_hidden", "disc_hidden", "reg_hidden", "sex_hidden"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# one optimization step


class Batch(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray | None
    sex: np.ndarray  # batch x 1, float
    age: np.ndarray  # batch x 1


def make_batch(dataset: Dataset, idx=None, multimodal: bool = True) -> Batch:
    idx = np.arange(dataset.n) if idx is None else np.asarray(idx)
    x2 = dataset.x2[idx] if (multimodal and dataset.x2 is not None) else None
    return Batch(dataset.x1[idx], x2, dataset.sex[idx].astype(np.float64)[:, None],
                 dataset.age[idx][:, None])


@dataclass
class OptimState:
    gen: AdamState
    disc: AdamState


def init_optim(bundle: ModelBundle) -> OptimState:
    params = bundle.parameters()
    gen = {k: p for k, p in params.items() if not k.startswith("disc.")}
    disc = {k: p for k, p in params.items() if k.startswith("disc.")}
    return OptimState(AdamState.zeros_like(gen), AdamState.zeros_like(disc))


@dataclass
class StepSettings:
    """Per-step knobs that do not belong to the model itself."""

    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    dropout: float = 0.0
    weight_decay: float = 0.0
    self_recon: bool = False

    @classmethod
    def from_config(cls, cfg: TrainConfig, lr: float | None = None) -> "StepSettings":
        return cls(cfg.weights, cfg.lr if lr is None else lr, cfg.dropout, cfg.weight_decay, cfg.self_recon)


def _mode(bundle: ModelBundle) -> str:
    return "unimodal" if bundle.arch.unimodal else "multimodal"


def _bind_group(bundle: ModelBundle, tape: Tape, trainable: set[str]):
    return {name: bind(net, tape, trainable=name in trainable) for name, net in bundle.nets.items()}


def _collect(bundle: ModelBundle, bound, grads, names) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        if name not in bound:
            continue
        b = bound[name]
        for i, (w, bb) in enumerate(zip(b.weights, b.biases)):
            out[f"{name}.W{i}"] = grads[w]
            out[f"{name}.b{i}"] = grads[bb]
    return out


def generator_objective(bundle: ModelBundle, bound, batch: Batch, settings: StepSettings,
                        rng: np.random.Generator | None, noise=None):
    """Build the encoder/decoder/regressor objective on the tape of ``bound``.

    ``noise`` may map ``"dist1"``/``"dist2"`` to fixed standard-normal arrays;
    otherwise they are drawn from ``rng``. Returns ``(total_tensor, parts)``.
    """
    arch = bundle.arch
    flags = arch.flags
    mode = _mode(bundle)
    tape = bound["enc1"].weights[0].tape
    sd = arch.shared_dim
    drop = settings.dropout
    noise = noise or {}
    terms = set(active_terms(arch.variant, mode))

    def latent(name, x):
        out = encode(bound[name], x, sd, drop, rng)
        if flags.variational:
            eps = noise.get("dist" + name[-1])
            if eps is None:
                eps = rng.standard_normal(out.dist_mu.shape)
            distinct = reparameterize(out.dist_mu, out.dist_logvar, eps)
        else:
            distinct = out.dist_mu
        return out, LatentCode(out.shared, distinct)

    x1 = tape.constant(batch.x1)
    o1, c1 = latent("enc1", x1)
    o2 = c2 = x2 = None
    if mode == "multimodal":
        if batch.x2 is None:
            raise DataError("multimodal step needs modality-2 features")
        x2 = tape.constant(batch.x2)
        o2, c2 = latent("enc2", x2)

    parts: dict = {}
    if mode == "multimodal":
        rec = cross_recon_loss(x1, x2, bound["dec1"], bound["dec2"], c1, c2, drop, rng)
        if settings.self_recon:
            rec = rec + self_recon_loss(x1, bound["dec1"], c1, drop, rng)
            rec = rec + self_recon_loss(x2, bound["dec2"], c2, drop, rng)
    else:
        rec = self_recon_loss(x1, bound["dec1"], c1, drop, rng)
    parts["rec"] = rec

    if "adv" in terms:
        adv = adversarial_losses(discriminate(bound["disc"], o1.shared))[0]
        if o2 is not None:
            adv = adv + adversarial_losses(discriminate(bound["disc"], o2.shared))[0]
        parts["adv"] = adv
    if "var" in terms:
        var = kl_gaussian(o1.dist_mu, o1.dist_logvar)
        if o2 is not None:
            var = var + kl_gaussian(o2.dist_mu, o2.dist_logvar)
        parts["var"] = var
    if "ratio" in terms:
        num, den = ratio_terms(o1.shared, o2.shared, c1.distinct, c2.distinct)
        if den.item() < 1e-6:
            log.warning("distance ratio: degenerate batch, distinct codes coincide")
        parts["ratio"] = num / (den + RATIO_EPS)

    sex = tape.constant(batch.sex) if flags.sex_input else None
    M = assemble_M(c1.shared, None if c2 is None else c2.shared, c1.distinct,
                   None if c2 is None else c2.distinct, sex)
    y_hat = regress(bound["reg"], M, bundle.age_offset, bundle.age_scale, drop, rng)
    parts["reg"] = regression_loss(tape.constant(batch.age), y_hat)
    if "sex" in terms:
        M_blind = M if sex is None else ad.slice_cols(M, 0, arch.code_width)
        p_sex = mlp_forward(bound["sex_head"], M_blind, drop, rng)
        parts["sex"] = binary_cross_entropy(p_sex, tape.constant(batch.sex))

    gated = {k: (v if k in terms else None) for k, v in parts.items()}
    return weighted_total(gated, settings.weights, mode), gated


def discriminator_objective(bundle: ModelBundle, bound, batch: Batch, settings: StepSettings,
                            rng: np.random.Generator, prior=None):
    """Discriminator loss summed over modalities; encoder codes enter as constants."""
    tape = bound["disc"].weights[0].tape
    sd = bundle.arch.shared_dim
    prior = prior or {}
    total = None
    xs = [("enc1", batch.x1)]
    if not bundle.arch.unimodal:
        xs.append(("enc2", batch.x2))
    for name, x in xs:
        shared = encode(bound[name], tape.constant(x), sd, settings.dropout, rng).shared
        fake = tape.constant(shared.value)  # detached
        z = prior.get(name)
        if z is None:
            z = rng.standard_normal((x.shape[0], sd))
        d_prior = discriminate(bound["disc"], tape.constant(z))
        d_fake = discriminate(bound["disc"], fake)
        loss = adversarial_losses(d_fake, d_prior)[1]
        total = loss if total is None else total + loss
    return total


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what} loss")


def train_step(batch: Batch, bundle: ModelBundle, settings: StepSettings, opt: OptimState,
               rng: np.random.Generator) -> LossBreakdown:
    """Two-phase update: discriminator first (if the variant is adversarial), then the rest.

    Parameters of ``bundle`` are updated in place; returns the generator-phase breakdown.
    """
    mode = _mode(bundle)
    if mode == "multimodal" and batch.x2 is None:
        raise DataError("multimodal step needs modality-2 features")
    disc_value = 0.0
    if bundle.arch.flags.adversarial:
        tape = Tape()
        bound = _bind_group(bundle, tape, {"disc"})
        d_loss = discriminator_objective(bundle, bound, batch, settings, rng)
        disc_value = d_loss.item()
        _check_finite(disc_value, "discriminator")
        grads = ad.backward(d_loss)
        adam_step(bundle.parameters(), _collect(bundle, bound, grads, ("disc",)), opt.disc,
                  settings.lr, settings.weight_decay)

    tape = Tape()
    bound = _bind_group(bundle, tape, set(GENERATOR_NETS))
    total, parts = generator_objective(bundle, bound, batch, settings, rng)
    _check_finite(total.item(), "generator")
    grads = ad.backward(total)
    adam_step(bundle.parameters(), _collect(bundle, bound, grads, GENERATOR_NETS), opt.gen,
              settings.lr, settings.weight_decay)
    return total_loss(parts, settings.weights, mode, disc_loss=disc_value)


def train_step_multimodal(batch, bundle, settings, opt, rng) -> LossBreakdown:
    if bundle.arch.unimodal:
        raise ConfigError("bundle is single-modality; use train_step_unimodal")
    return train_step(batch, bundle, settings, opt, rng)


def train_step_unimodal(batch, bundle, settings, opt, rng) -> LossBreakdown:
    if not bundle.arch.unimodal:
        raise ConfigError("bundle has a modality-2 path; use train_step_multimodal")
    return train_step(batch._replace(x2=None), bundle, settings, opt, rng)


# ---------------------------------------------------------------------------
# scheduling and fitting


class PlateauSchedule:
    """Cut the learning rate after ``patience`` epochs without improvement; stop after
    ``stop_patience``. The stop check wins when both fire on the same epoch."""

    def __init__(self, lr: float, patience: int = 9, factor: float = 0.25, stop_patience: int = 18):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.stop_patience = stop_patience
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0
        self.lr_wait = 0
        self.epoch = -1

    def step(self, metric: float) -> tuple[bool, bool, bool]:
        """Feed one epoch's validation metric; returns ``(improved, reduced, stop)``."""
        self.epoch += 1
        if metric < self.best:
            self.best = metric
            self.best_epoch = self.epoch
            self.wait = self.lr_wait = 0
            return True, False, False
        self.wait += 1
        self.lr_wait += 1
        if self.wait >= self.stop_patience:
            return False, False, True
        if self.lr_wait >= self.patience:
            self.lr *= self.factor
            self.lr_wait = 0
            return False, True, False
        return False, False, False


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: LossBreakdown
    val_mae: float
    digest: str

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, **self.losses.to_dict(),
                "val_mae": self.val_mae, "digest": self.digest}


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int = -1

    @property
    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def val_mae(self) -> list[float]:
        return [e.val_mae for e in self.epochs]

    def to_jsonl(self) -> str:
        """One JSON record per epoch, newline-delimited."""
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.epochs)


def calibrate_age_head(bundle: ModelBundle, ages) -> ModelBundle:
    """Set the regressor's output offset/scale to the mean/std of the training ages."""
    ages = np.asarray(ages, dtype=np.float64)
    bundle.age_offset = float(ages.mean())
    std = float(ages.std())
    bundle.age_scale = std if std > 0 else 1.0
    return bundle


def _epoch_mean(records: list[LossBreakdown]) -> LossBreakdown:
    keys = LossBreakdown().to_dict().keys()
    return LossBreakdown(**{k: float(np.mean([getattr(r, k) for r in records])) for k in keys})


def _mae(bundle: ModelBundle, ds: Dataset) -> float:
    x2 = None if bundle.arch.unimodal else ds.x2
    pred = predict(bundle, ds.x1, x2, ds.sex)
    return float(np.mean(np.abs(pred - ds.age)))


def fit(dataset: Dataset, config: TrainConfig, rng: np.random.Generator | None = None,
        validation_metric: Callable[[int, ModelBundle], float] | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelBundle, TrainHistory]:
    """Train one model with a sex-stratified validation split, plateau LR cuts and early stopping.

    The returned bundle carries the parameters of the best validation epoch, or
    the last epoch when ``config.restore_best`` is off.
    ``validation_metric(epoch, bundle)`` replaces the validation MAE when given.
    """
    config.validate()
    if dataset.n < 1:
        raise DataError("empty dataset")
    multimodal = config.mode == "multimodal"
    if multimodal and not dataset.multimodal:
        raise DataError("multimodal training needs modality-2 features")
    rng = np.random.default_rng(config.seed) if rng is None else rng

    if config.val_fraction > 0:
        train_idx, val_idx = stratified_split(dataset.sex, config.val_fraction, rng)
    else:
        train_idx, val_idx = np.arange(dataset.n), np.arange(0)
    train = dataset.subset(train_idx)
    val = dataset.subset(val_idx) if val_idx.size else None

    arch = config.architecture(dataset.m1, dataset.m2 if multimodal else None)
    bundle = init_params(arch, config.seed)
    calibrate_age_head(bundle, train.age)
    history = TrainHistory()
    if config.max_epochs == 0:
        return bundle, history
    if config.batch_size > train.n:
        raise DataError(f"batch_size {config.batch_size} exceeds the {train.n} training subjects")
    if val is None and validation_metric is None:
        raise ConfigError("val_fraction must be positive (validation drives the schedule)")

    opt = init_optim(bundle)
    schedule = PlateauSchedule(config.lr, config.lr_patience, config.lr_factor, config.early_stop_patience)
    best = bundle.copy()
    for epoch in range(config.max_epochs):
        lr = schedule.lr
        settings = StepSettings.from_config(config, lr)
        order = rng.permutation(train.n)
        n_batches = train.n // config.batch_size
        # a leftover of one subject is folded into the last batch
        bounds = [(i * config.batch_size, (i + 1) * config.batch_size) for i in range(n_batches)]
        if train.n - n_batches * config.batch_size == 1:
            bounds[-1] = (bounds[-1][0], train.n)
        elif train.n > n_batches * config.batch_size:
            bounds.append((n_batches * config.batch_size, train.n))
        records = []
        for lo, hi in bounds:
            batch = make_batch(train, order[lo:hi], multimodal)
            try:
                records.append(train_step(batch, bundle, settings, opt, rng))
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", last_good=best) from exc
        if validation_metric is not None:
            metric = float(validation_metric(epoch, bundle))
        else:
            metric = _mae(bundle, val)
        rec = EpochRecord(epoch, lr, _epoch_mean(records), metric, bundle.digest())
        history.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        improved, _reduced, stop = schedule.step(metric)
        if improved:
            best = bundle.copy()
            history.best_epoch = epoch
        log.debug("epoch %d lr %.2e loss %.4f val %.4f", epoch, lr, rec.losses.total, metric)
        if stop:
            history.stop_reason = "early_stop"
            break
    return (best if config.restore_best else bundle), history


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray  # fold index per subject
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.folds == f)) for f in range(self.k)]

    def digest(self) -> str:
        return hashlib.sha256(self.folds.astype(np.int64).tobytes()).hexdigest()[:16]


def kfold_split(n: int, k: int, seed: int) -> FoldAssignment:
    """Seeded permutation dealt round-robin into ``k`` folds (sizes differ by at most 1)."""
    if k < 2:
        raise ConfigError("k must be at least 2")
    if k > n:
        raise ConfigError(f"cannot split {n} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return FoldAssignment(folds, k)
