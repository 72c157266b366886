"""Model checkpoints: one ``.npz`` container tagged ``savae-ckpt-v1``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureMask, StandardizationStats
from .errors import DataError
from .networks import Architecture, LayerSpec, MlpParams, ModelBundle

FORMAT_TAG = "savae-ckpt-v1"


@dataclass
class Checkpoint:
    bundle: ModelBundle
    stats: StandardizationStats | None = None
    mask: FeatureMask | None = None
    meta: dict = field(default_factory=dict)

    @property
    def raw_dims(self) -> tuple[int | None, int | None]:
        """Feature counts expected in the raw (pre-selection) input files."""
        return self.meta.get("raw_m1"), self.meta.get("raw_m2")


def save_checkpoint(path, bundle: ModelBundle, stats: StandardizationStats | None = None,
                    mask: FeatureMask | None = None, meta: dict | None = None,
                    raw_dims: tuple[int | None, int | None] = (None, None)) -> Path:
    path = Path(path)
    arch = asdict(bundle.arch)
    header = {
        "format": FORMAT_TAG,
        "arch": arch,
        "variant": bundle.variant,
        "latent": {"shared_dim": bundle.arch.shared_dim, "dist_dim": bundle.arch.dist_dim},
        "layers": {name: [asdict(s) for s in net.specs] for name, net in bundle.nets.items()},
        "age_offset": bundle.age_offset,
        "age_scale": bundle.age_scale,
        "mask": None if mask is None else {"idx1": list(mask.idx1),
                                           "idx2": None if mask.idx2 is None else list(mask.idx2)},
        "raw_m1": raw_dims[0],
        "raw_m2": raw_dims[1],
        "meta": meta or {},
    }
    arrays = {"param." + k: np.ascontiguousarray(v) for k, v in bundle.parameters().items()}
    if stats is not None:
        arrays.update(stats.to_arrays())
    with path.open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    with z:
        if "header" not in z.files:
            raise DataError(f"{path} is not a model checkpoint")
        header = json.loads(str(z["header"]))
        if header.get("format") != FORMAT_TAG:
            raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
        a = header["arch"]
        for k in ("enc_hidden", "dec_hidden", "disc_hidden", "reg_hidden", "sex_hidden"):
            a[k] = tuple(a[k])
        arch = Architecture(**a)
        nets = {}
        for name, layers in header["layers"].items():
            specs = tuple(LayerSpec(**s) for s in layers)
            nets[name] = MlpParams(
                specs,
                [z[f"param.{name}.W{i}"] for i in range(len(specs))],
                [z[f"param.{name}.b{i}"] for i in range(len(specs))],
            )
        bundle = ModelBundle(arch, nets, header["age_offset"], header["age_scale"])
        stats = StandardizationStats.from_arrays(z) if "std.mean1" in z.files else None
    m = header.get("mask")
    mask = None if m is None else FeatureMask(tuple(m["idx1"]), None if m["idx2"] is None else tuple(m["idx2"]))
    meta = dict(header.get("meta", {}))
    meta["raw_m1"], meta["raw_m2"] = header.get("raw_m1"), header.get("raw_m2")
    return Checkpoint(bundle, stats, mask, meta)
