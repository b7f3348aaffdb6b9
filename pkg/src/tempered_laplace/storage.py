"""Binary blobs with a JSON header for MAP estimates and posteriors.

Layout::

    offset 0   8 bytes   magic b"TLAPBLOB"
    offset 8   uint64    header length H (little-endian)
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          float64 little-endian payload

The header lists the payload arrays (``name`` and ``shape``) in storage order
together with ``kind``, ``d``, ``layer_shapes`` and kind-specific metadata
(``lambda`` and ``prior_variance`` for posteriors, the training config and
train metrics for MAP files).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .laplace import TemperedPosterior
from .nn import MlpArchitecture, ModelParams
from .training import MapEstimate, TrainConfig

MAGIC = b"TLAPBLOB"


def write_blob(path, header: dict, arrays: list):
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays]
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter blob")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[spec["name"]] = a.reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    return header, arrays


def _arch_header(arch: MlpArchitecture) -> dict:
    return {"arch": arch.to_dict(), "d": arch.num_params,
            "layer_shapes": [list(s) for s in arch.layer_shapes]}


def save_map(path, est: MapEstimate):
    header = {"kind": "map", "config": asdict(est.config), "train_nll": est.train_nll,
              "train_zero_one": est.train_zero_one, **_arch_header(est.params.arch)}
    write_blob(path, header, [("weights", est.params.weights)])


def load_map(path) -> MapEstimate:
    header, arrays = read_blob(path)
    if header["kind"] != "map":
        raise ValueError(f"{path}: expected a MAP file, found {header['kind']!r}")
    arch = MlpArchitecture.from_dict(header["arch"])
    return MapEstimate(ModelParams(arrays["weights"], arch), header["train_nll"],
                       header["train_zero_one"], TrainConfig(**header["config"]))


def save_posterior(path, post: TemperedPosterior):
    header = {"kind": post.kind, "lambda": post.lam, "prior_variance": post.prior_variance,
              "variance": post.variance, **_arch_header(post.mean.arch)}
    arrays = [("mean", post.mean.weights)]
    if post.kind == "kfac":
        for l, (a, Ua, g, Ug) in enumerate(post.eigen):
            arrays += [(f"a_eigvals_{l}", a), (f"a_eigvecs_{l}", Ua),
                       (f"g_eigvals_{l}", g), (f"g_eigvecs_{l}", Ug)]
    write_blob(path, header, arrays)


def load_posterior(path) -> TemperedPosterior:
    header, arrays = read_blob(path)
    if header["kind"] not in ("isotropic", "kfac"):
        raise ValueError(f"{path}: not a posterior file ({header['kind']!r})")
    arch = MlpArchitecture.from_dict(header["arch"])
    mean = ModelParams(arrays["mean"], arch)
    eigen = None
    if header["kind"] == "kfac":
        eigen = [(arrays[f"a_eigvals_{l}"], arrays[f"a_eigvecs_{l}"],
                  arrays[f"g_eigvals_{l}"], arrays[f"g_eigvecs_{l}"])
                 for l in range(arch.num_layers)]
    return TemperedPosterior(mean, header["kind"], header["lambda"], header["prior_variance"],
                             header["variance"], eigen)
