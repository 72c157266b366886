"""MLP building blocks: two encoders, two decoders, a code discriminator and a regressor.

Each encoder emits a deterministic shared code plus a Gaussian head
``(mu, logvar)`` for the modality-specific ("distinct") code.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ShapeError

VARIANTS = ("AE", "AAE", "VAE", "AVAE", "SA-AVAE", "M-AVAE")
ACTIVATIONS = ("tanh", "relu", "sigmoid", "linear")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class VariantFlags(NamedTuple):
    adversarial: bool
    variational: bool
    ratio: bool
    sex_input: bool
    sex_head: bool


_FLAGS = {
    "AE": VariantFlags(False, False, False, False, False),
    "AAE": VariantFlags(True, False, False, False, False),
    "VAE": VariantFlags(False, True, False, False, False),
    "AVAE": VariantFlags(True, True, True, False, False),
    "SA-AVAE": VariantFlags(True, True, True, True, False),
    "M-AVAE": VariantFlags(True, True, True, False, True),
}


def variant_flags(variant: str) -> VariantFlags:
    """Which loss paths and inputs a variant switches on."""
    try:
        return _FLAGS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}") from None


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "tanh"


def _chain(dims, hidden_act, out_act) -> tuple[LayerSpec, ...]:
    layers = []
    for i in range(len(dims) - 1):
        act = out_act if i == len(dims) - 2 else hidden_act
        layers.append(LayerSpec(int(dims[i]), int(dims[i + 1]), act))
    return tuple(layers)


def check_specs(specs) -> None:
    if not specs:
        raise ConfigError("a network needs at least one layer")
    for spec in specs:
        if spec.in_dim < 1 or spec.out_dim < 1:
            raise ConfigError(f"layer dims must be positive: {spec}")
        if spec.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {spec.activation!r}")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ConfigError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")


@dataclass(frozen=True)
class Architecture:
    """Layer widths of every network. ``m2=None`` selects the single-modality model."""

    m1: int
    m2: int | None = None
    variant: str = "SA-AVAE"
    shared_dim: int = 50
    dist_dim: int = 70
    enc_hidden: tuple[int, ...] = (256, 128)
    dec_hidden: tuple[int, ...] = (128, 256)
    disc_hidden: tuple[int, ...] = (64, 32)
    reg_hidden: tuple[int, ...] = (128, 64)
    sex_hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"

    @property
    def unimodal(self) -> bool:
        return self.m2 is None

    @property
    def flags(self) -> VariantFlags:
        return variant_flags(self.variant)

    @property
    def latent_dim(self) -> int:
        return self.shared_dim + self.dist_dim

    @property
    def code_width(self) -> int:
        """Width of the latent part of the regressor input (without sex)."""
        n_mod = 1 if self.unimodal else 2
        return n_mod * self.latent_dim

    @property
    def regressor_in(self) -> int:
        return self.code_width + (1 if self.flags.sex_input else 0)

    def layer_specs(self) -> dict[str, tuple[LayerSpec, ...]]:
        variant_flags(self.variant)
        act = self.activation
        enc_out = self.shared_dim + 2 * self.dist_dim
        specs = {
            "enc1": _chain((self.m1, *self.enc_hidden, enc_out), act, "linear"),
            "dec1": _chain((self.latent_dim, *self.dec_hidden, self.m1), act, "linear"),
            "disc": _chain((self.shared_dim, *self.disc_hidden, 1), act, "sigmoid"),
            "reg": _chain((self.regressor_in, *self.reg_hidden, 1), act, "linear"),
        }
        if not self.unimodal:
            specs["enc2"] = _chain((self.m2, *self.enc_hidden, enc_out), act, "linear")
            specs["dec2"] = _chain((self.latent_dim, *self.dec_hidden, self.m2), act, "linear")
        if self.flags.sex_head:
            specs["sex_head"] = _chain((self.code_width, *self.sex_hidden, 1), act, "sigmoid")
        for s in specs.values():
            check_specs(s)
        return specs


@dataclass
class MlpParams:
    """Weights ``out x in`` and biases ``1 x out`` for each layer."""

    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def copy(self) -> "MlpParams":
        return MlpParams(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(specs, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    check_specs(specs)
    weights, biases = [], []
    for s in specs:
        limit = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        weights.append(rng.uniform(-limit, limit, size=(s.out_dim, s.in_dim)))
        biases.append(np.zeros((1, s.out_dim)))
    return MlpParams(tuple(specs), weights, biases)


def _net_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per network so variants with different heads share encoder inits
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class ModelBundle:
    """All trainable networks of one model plus the regressor's output scaling.

    ``age_offset``/``age_scale`` map the regressor's raw output to years; they
    are fixed data statistics, not trained.
    """

    arch: Architecture
    nets: dict[str, MlpParams]
    age_offset: float = 0.0
    age_scale: float = 1.0

    def __post_init__(self):
        has2 = "enc2" in self.nets and "dec2" in self.nets
        if has2 == self.arch.unimodal:
            raise ConfigError("enc2/dec2 must be present exactly when the model is multimodal")
        if ("sex_head" in self.nets) != self.arch.flags.sex_head:
            raise ConfigError("a sex head is present exactly for the M-AVAE variant")

    @property
    def variant(self) -> str:
        return self.arch.variant

    def __getattr__(self, name):
        nets = self.__dict__.get("nets", {})
        if name in ("enc1", "enc2", "dec1", "dec2", "disc", "reg", "sex_head"):
            return nets.get(name)
        raise AttributeError(name)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat ``"net.W<i>" / "net.b<i>"`` view of the (live) parameter arrays."""
        flat = {}
        for name in sorted(self.nets):
            net = self.nets[name]
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                flat[f"{name}.W{i}"] = w
                flat[f"{name}.b{i}"] = b
        return flat

    def set_parameters(self, flat: dict[str, np.ndarray]) -> None:
        for key, value in flat.items():
            name, slot = key.split(".")
            net = self.nets[name]
            arrs = net.weights if slot[0] == "W" else net.biases
            idx = int(slot[1:])
            if arrs[idx].shape != value.shape:
                raise ShapeError(f"{key}: expected {arrs[idx].shape}, got {value.shape}")
            arrs[idx] = np.array(value, dtype=np.float64)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.arch, {k: v.copy() for k, v in self.nets.items()},
                           self.age_offset, self.age_scale)

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, arr in self.parameters().items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.array([self.age_offset, self.age_scale]).tobytes())
        return h.hexdigest()


def init_params(arch: Architecture, seed: int) -> ModelBundle:
    """Fresh bundle for ``arch``; deterministic in ``seed``."""
    specs = arch.layer_specs()
    nets = {name: init_mlp(s, _net_rng(seed, name)) for name, s in specs.items()}
    return ModelBundle(arch, nets)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class BoundMlp:
    """An MLP whose parameters live on a tape (as variables or constants)."""

    specs: tuple[LayerSpec, ...]
    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim


def bind(net: MlpParams, tape: Tape, trainable: bool = True) -> BoundMlp:
    make = tape.variable if trainable else tape.constant
    return BoundMlp(net.specs, [make(w) for w in net.weights], [make(b) for b in net.biases])


def _bound(net, tape: Tape) -> BoundMlp:
    return net if isinstance(net, BoundMlp) else bind(net, tape, trainable=False)


_ACT = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid}


def mlp_forward(net, x: Tensor, dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Run an MLP. Dropout (inverted scaling) is applied after hidden activations only."""
    net = _bound(net, x.tape)
    if x.shape[1] != net.in_dim:
        raise ShapeError(f"network expects {net.in_dim} input columns, got {x.shape[1]}")
    h = x
    last = len(net.specs) - 1
    for i, (spec, w, b) in enumerate(zip(net.specs, net.weights, net.biases)):
        h = ad.linear(h, w, b)
        if spec.activation != "linear":
            h = _ACT[spec.activation](h)
        if i < last and dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs a random generator")
            keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * x.tape.constant(keep)
    return h


class EncoderOutput(NamedTuple):
    shared: Tensor
    dist_mu: Tensor
    dist_logvar: Tensor


def encode(enc, x: Tensor, shared_dim: int = 50, dropout: float = 0.0, rng=None) -> EncoderOutput:
    """Split the encoder output into ``(shared, dist_mu, dist_logvar)``; logvar is clamped."""
    out = mlp_forward(enc, x, dropout, rng)
    width = out.shape[1]
    dist_dim = (width - shared_dim) // 2
    if dist_dim < 1 or shared_dim + 2 * dist_dim != width:
        raise ShapeError(f"encoder width {width} cannot be split with shared_dim={shared_dim}")
    shared = ad.slice_cols(out, 0, shared_dim)
    mu = ad.slice_cols(out, shared_dim, shared_dim + dist_dim)
    logvar = ad.clip(ad.slice_cols(out, shared_dim + dist_dim, width), LOGVAR_MIN, LOGVAR_MAX)
    return EncoderOutput(shared, mu, logvar)


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    """``mu + exp(logvar / 2) * noise`` with caller-supplied standard-normal noise."""
    noise_val = noise.value if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if mu.shape != logvar.shape or noise_val.shape != mu.shape:
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {noise_val.shape} differ")
    if not isinstance(noise, Tensor):
        noise = mu.tape.constant(noise_val)
    return mu + ad.exp(logvar * 0.5) * noise


def decode(dec, shared: Tensor, distinct: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
    z = ad.concat([shared, distinct])
    return mlp_forward(dec, z, dropout, rng)


def discriminate(disc, code: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
    """Probability (``batch x 1``) that each row was drawn from the prior."""
    net = _bound(disc, code.tape)
    if net.specs[-1].activation != "sigmoid":
        raise ConfigError("discriminator must end in a sigmoid")
    return mlp_forward(net, code, dropout, rng)


def assemble_M(shared1: Tensor, shared2: Tensor | None, dist1: Tensor, dist2: Tensor | None,
               sex: Tensor | None = None) -> Tensor:
    """Regressor input ``[shared1, shared2, dist1, dist2, sex]``; absent blocks are skipped."""
    parts = [p for p in (shared1, shared2, dist1, dist2, sex) if p is not None]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"assemble_M: row counts differ {[p.shape for p in parts]}")
    return ad.concat(parts)


def regress(reg, M: Tensor, age_offset: float = 0.0, age_scale: float = 1.0,
            dropout: float = 0.0, rng=None) -> Tensor:
    """Predicted age (``batch x 1``): ``age_offset + age_scale * P(M)``."""
    out = mlp_forward(reg, M, dropout, rng)
    if out.shape[1] != 1:
        raise ShapeError("regressor must have a single output")
    if age_scale != 1.0:
        out = out * age_scale
    if age_offset != 0.0:
        out = out + age_offset
    return out


# ---------------------------------------------------------------------------
# inference


@dataclass
class Codes:
    """Deterministic latent codes for a batch (numpy arrays)."""

    shared1: np.ndarray
    dist1: np.ndarray
    shared2: np.ndarray | None = None
    dist2: np.ndarray | None = None


def infer_codes(bundle: ModelBundle, x1: np.ndarray, x2: np.ndarray | None = None) -> Codes:
    """Encoder means (no sampling, no dropout)."""
    tape = Tape()
    sd = bundle.arch.shared_dim
    o1 = encode(bundle.enc1, tape.constant(x1), sd)
    codes = Codes(o1.shared.numpy(), o1.dist_mu.numpy())
    if not bundle.arch.unimodal:
        if x2 is None:
            raise ShapeError("multimodal model needs modality-2 features")
        o2 = encode(bundle.enc2, tape.constant(x2), sd)
        codes.shared2, codes.dist2 = o2.shared.numpy(), o2.dist_mu.numpy()
    return codes


def predict(bundle: ModelBundle, x1: np.ndarray, x2: np.ndarray | None = None,
            sex: np.ndarray | None = None) -> np.ndarray:
    """Predicted ages in years (1-D array)."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x1.shape[1] != bundle.arch.m1:
        raise ShapeError(f"model expects {bundle.arch.m1} modality-1 features, got {x1.shape[1]}")
    if not bundle.arch.unimodal:
        if x2 is None:
            raise ShapeError("multimodal model needs modality-2 features")
        x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
        if x2.shape[1] != bundle.arch.m2:
            raise ShapeError(f"model expects {bundle.arch.m2} modality-2 features, got {x2.shape[1]}")
    codes = infer_codes(bundle, x1, x2)
    tape = Tape()
    c = tape.constant
    sex_t = None
    if bundle.arch.flags.sex_input:
        if sex is None:
            raise ShapeError("sex-aware model needs the sex column")
        sex_t = c(np.asarray(sex, dtype=np.float64).reshape(-1, 1))
    M = assemble_M(
        c(codes.shared1),
        None if codes.shared2 is None else c(codes.shared2),
        c(codes.dist1),
        None if codes.dist2 is None else c(codes.dist2),
        sex_t,
    )
    return regress(bundle.reg, M, bundle.age_offset, bundle.age_scale).value[:, 0].copy()
