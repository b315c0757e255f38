"""Model container: ``SNMNET\\x00`` magic, u64 header length, JSON header, raw arrays.

The header records the format tag and version, the full training config, the
scalar model fields and, for every tensor, its dtype, shape and byte offset in
the trailing blob. Output is byte-stable: no timestamps, sorted keys.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from snmnet.backbone import BackboneConfig, build_backbone
from snmnet.errors import LoadError
from snmnet.refine import BNState, Refiner
from snmnet.scorer import ClassStats
from snmnet.train import AnchorSet, LinearHead, TrainConfig, TrainedModel

MAGIC = b"SNMNET\x00"
FORMAT = "snmnet-model"
VERSION = 1


def _collect(model: TrainedModel) -> dict[str, np.ndarray]:
    arrays = {f"backbone/{k}": v for k, v in model.backbone.params.items()}
    bn = model.refiner.bn
    for name in ("running_mean", "running_var", "gamma", "beta"):
        arrays[f"bn/{name}"] = getattr(bn, name)
    arrays.update({f"head/{k}": v for k, v in model.head.params.items()})
    arrays["class_ids"] = model.class_ids
    for st in model.stats:
        arrays[f"stats/{st.class_id}/mu"] = st.mu
        arrays[f"stats/{st.class_id}/sigma_reg"] = st.sigma_reg
        arrays[f"stats/{st.class_id}/chol"] = st.chol
    return arrays


def to_bytes(model: TrainedModel) -> bytes:
    arrays = _collect(model)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "model": {
            "channels": model.backbone.channels,
            "t_steps": model.backbone.t_steps,
            "tau": model.tau,
            "best_epoch": model.best_epoch,
            "history": model.history,
            "stats_n": {str(s.class_id): s.n_samples for s in model.stats},
            "bn": {"eps": model.refiner.bn.eps, "momentum": model.refiner.bn.momentum,
                   "mode": model.refiner.bn.mode},
        },
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_model(model: TrainedModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model))
    return path


def from_bytes(data: bytes) -> TrainedModel:
    if not data.startswith(MAGIC):
        raise LoadError("not an snmnet model file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise LoadError(f"unsupported model format {header.get('format')!r} v{header.get('version')}")
    blob = memoryview(data)[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()

    cfg_dict = dict(header["config"])
    cfg_dict["backbone"] = BackboneConfig(**cfg_dict["backbone"])
    cfg = TrainConfig(**cfg_dict)
    meta = header["model"]
    backbone = build_backbone(cfg.backbone, meta["channels"], meta["t_steps"], cfg.dropout)
    backbone.load_state_dict({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("backbone/")})
    refiner = Refiner(backbone.out_dim, cfg.use_bn, cfg.use_l2n, affine=cfg.bn_affine)
    refiner.bn = BNState(backbone.out_dim, meta["bn"]["eps"], meta["bn"]["momentum"], cfg.bn_affine,
                         meta["bn"]["mode"], arrays["bn/running_mean"], arrays["bn/running_var"],
                         arrays["bn/gamma"], arrays["bn/beta"])
    class_ids = arrays["class_ids"]
    head = LinearHead(backbone.out_dim, len(class_ids), np.random.default_rng(0))
    head.params = {"W": arrays["head/W"], "b": arrays["head/b"]}
    stats = [
        ClassStats(int(c), arrays[f"stats/{c}/mu"], arrays[f"stats/{c}/sigma_reg"],
                   arrays[f"stats/{c}/chol"], int(n))
        for c, n in sorted(meta["stats_n"].items(), key=lambda kv: int(kv[0]))
    ]
    anchors = AnchorSet(len(class_ids), cfg.anchor_magnitude) if cfg.head == "cac" else None
    return TrainedModel(cfg, backbone, refiner, head, class_ids, anchors, stats,
                        float(meta["tau"]), meta["history"], int(meta["best_epoch"]))


def load_model(path: str | Path) -> TrainedModel:
    return from_bytes(Path(path).read_bytes())
