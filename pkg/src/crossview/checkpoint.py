"""Deterministic binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
with sorted keys, then raw little-endian float64 parameter bytes in
sorted-name order. No timestamps or environment data anywhere, so saving
the same parameters twice yields byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ContractError
from .vit import DecoderConfig, EncoderConfig

MAGIC = b"CVCKPT01"
ARCHES = ("cve", "cve-meta", "cvm", "cvm-meta")


@dataclass
class CheckpointData:
    arch: str
    phase: str
    config: dict
    params: dict[str, torch.Tensor]
    extra: dict

    def state_tensor(self, name: str) -> torch.Tensor:
        return self.params[name]


def model_config_dict(model) -> dict:
    """JSON-serializable constructor arguments for a pretraining model."""
    from .models import CveMae, CvmMae

    if isinstance(model, CveMae):
        return {
            "ground": asdict(model.ground_config),
            "satellite": asdict(model.satellite_config),
            "decoder": asdict(model.decoder.config),
            "freeze_satellite": model.freeze_satellite,
            "temperature": model.temperature,
        }
    if isinstance(model, CvmMae):
        return {
            "ground": asdict(model.ground_config),
            "satellite": asdict(model.satellite_config),
            "decoder_ground": asdict(model.decoder_ground.config),
            "decoder_satellite": asdict(model.decoder_satellite.config),
        }
    raise ContractError(f"cannot describe model of type {type(model).__name__}")


def save_checkpoint(
    path: str,
    module: torch.nn.Module,
    arch: str,
    phase: str,
    config: dict,
    extra: dict | None = None,
) -> None:
    """Atomic write: serialize to a sibling temp file, then rename."""
    if arch not in ARCHES:
        raise ContractError(f"unknown architecture tag {arch!r}, expected one of {ARCHES}")
    names = sorted(name for name, _ in module.named_parameters())
    params = dict(module.named_parameters())
    header: dict = {
        "version": 1,
        "arch": arch,
        "phase": phase,
        "dtype": "float64",
        "config": config,
        "extra": extra or {},
        "params": {},
    }
    offset = 0
    blobs = []
    for name in names:
        arr = params[name].detach().cpu().to(torch.float64).numpy()
        blob = np.ascontiguousarray(arr).astype("<f8").tobytes()
        header["params"][name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        offset += len(blob)
        blobs.append(blob)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContractError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        body = fh.read()
    params = {}
    for name, meta in header["params"].items():
        raw = body[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(meta["shape"]).copy()
        params[name] = torch.from_numpy(arr)
    return CheckpointData(
        arch=header["arch"],
        phase=header["phase"],
        config=header["config"],
        params=params,
        extra=header.get("extra", {}),
    )


def _encoder_config(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)


def _decoder_config(d: dict) -> DecoderConfig:
    return DecoderConfig(**d)


def build_pretrain_model(data: CheckpointData):
    """Reconstruct a pretraining architecture and load its parameters."""
    from .models import CveMae, CvmMae

    cfg = data.config
    use_meta = data.arch.endswith("-meta")
    if data.arch.startswith("cve"):
        model = CveMae(
            _encoder_config(cfg["ground"]),
            _encoder_config(cfg["satellite"]),
            _decoder_config(cfg["decoder"]),
            use_meta=use_meta,
            freeze_satellite=cfg.get("freeze_satellite", True),
            temperature=cfg.get("temperature", 1.0),
        )
    elif data.arch.startswith("cvm"):
        model = CvmMae(
            _encoder_config(cfg["ground"]),
            _encoder_config(cfg["satellite"]),
            _decoder_config(cfg["decoder_ground"]),
            _decoder_config(cfg["decoder_satellite"]),
            use_meta=use_meta,
        )
    else:
        raise ContractError(f"unknown architecture tag {data.arch!r}")
    if data.params:  # a bare config (classifier backbone) builds unloaded
        load_into(model, data.params)
    return model


def build_classifier(data: CheckpointData):
    """Reconstruct a probe/finetune classifier checkpoint."""
    from .models import Classifier

    cfg = data.config
    backbone_data = CheckpointData(
        arch=data.arch, phase="pretrain", config=cfg["backbone"], params={}, extra={}
    )
    backbone = build_pretrain_model(backbone_data)
    clf = Classifier(
        backbone,
        n_classes=cfg["n_classes"],
        phase=data.phase,
        use_meta=cfg.get("use_meta", False),
        meta_dropout_p=cfg.get("meta_dropout_p", 0.25),
    )
    load_into(clf, data.params)
    return clf


def load_into(module: torch.nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise ContractError(
            f"parameter mismatch: missing {missing[:3]}..., unexpected {unexpected[:3]}..."
            if len(missing) > 3 or len(unexpected) > 3
            else f"parameter mismatch: missing {missing}, unexpected {unexpected}"
        )
    with torch.no_grad():
        for name, tensor in params.items():
            if tuple(own[name].shape) != tuple(tensor.shape):
                raise ContractError(
                    f"shape mismatch for {name}: {tuple(own[name].shape)} vs {tuple(tensor.shape)}"
                )
            own[name].copy_(tensor.to(own[name].dtype))
