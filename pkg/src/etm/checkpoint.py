"""Checkpoint bundles: a JSON manifest plus one checksummed binary blob per tensor.

Blob layout (little endian)::

    offset 0   4 bytes   magic b"ETMT"
           4   uint16    dtype code (1 = float32)
           6   uint16    rank
           8   uint64    element count
          16   int64 x rank   shape
           .   float32 x count data

Bundles hold the segmentation network and every stored memory pair.
Discriminators are never written.
"""
from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .config import TrainConfig, config_hash
from .metrics import RunHistory
from .models import SegNet, TargetMemory, TmStore

BUNDLE_VERSION = 1
MAGIC = b"ETMT"
_HEADER = struct.Struct("<4sHHQ")
_DTYPES = {1: np.dtype("<f4")}
_CODES = {np.dtype("<f4"): 1}


class CheckpointError(RuntimeError):
    pass


def encode_tensor(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy()
    if arr.dtype != np.float32:
        raise CheckpointError(f"only float32 tensors are stored, got {arr.dtype}")
    arr = arr.astype("<f4", copy=False)
    header = _HEADER.pack(MAGIC, _CODES[arr.dtype], arr.ndim, arr.size)
    return header + np.asarray(arr.shape, dtype="<i8").tobytes() + arr.tobytes()


def decode_tensor(blob: bytes, name: str = "<blob>") -> torch.Tensor:
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"blob {name} is truncated")
    magic, code, rank, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"blob {name} has bad magic {magic!r}")
    if code not in _DTYPES:
        raise CheckpointError(f"blob {name} has unknown dtype code {code}")
    start = _HEADER.size + 8 * rank
    if len(blob) != start + count * _DTYPES[code].itemsize:
        raise CheckpointError(f"blob {name} has the wrong length")
    shape = tuple(int(s) for s in np.frombuffer(blob, "<i8", rank, _HEADER.size))
    if int(np.prod(shape, dtype=np.int64)) != count:
        raise CheckpointError(f"blob {name}: shape {shape} does not match element count {count}")
    data = np.frombuffer(blob, _DTYPES[code], count, start).reshape(shape)
    return torch.from_numpy(data.astype(np.float32, copy=True))


def _file_name(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", key) + ".bin"


@dataclass
class CheckpointBundle:
    experiment: dict
    tensors: Dict[str, torch.Tensor]
    tm_domains: list = field(default_factory=list)
    tm_branches: Dict[int, list] = field(default_factory=dict)
    history: Optional[RunHistory] = None
    completed_domain: int = 0

    @property
    def domain_names(self) -> list:
        return [d["name"] for d in self.experiment["domains"]]

    @property
    def config_hash(self) -> str:
        return config_hash(self.experiment)

    @classmethod
    def from_state(cls, experiment: dict, segnet: SegNet, tm_store: TmStore,
                   history: Optional[RunHistory], completed_domain: int) -> "CheckpointBundle":
        tensors = {f"segnet.{k}": v for k, v in segnet.state_dict().items()}
        branches = {}
        for d, pair in tm_store.items():
            branches[d] = [pair[0].conv is not None, pair[0].pool_conv is not None]
            for level, tm in enumerate(pair, start=1):
                for k, v in tm.state_dict().items():
                    tensors[f"tm.{d}.{level}.{k}"] = v
        return cls(experiment, tensors, tm_store.domains(), branches, history, completed_domain)

    def segnet(self) -> SegNet:
        cfg = TrainConfig.from_experiment(self.experiment)
        net = SegNet(cfg.num_classes, cfg.channels, cfg.head_width)
        prefix = "segnet."
        state = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        net.load_state_dict(state, strict=True)
        return net

    def tm_store(self, net: SegNet) -> TmStore:
        store = TmStore()
        for d in self.tm_domains:
            conv, pool = self.tm_branches[d]
            pair = []
            for level, c_in in ((1, net.c_mid), (2, net.c_top)):
                tm = TargetMemory(c_in, net.num_classes, d, conv, pool)
                prefix = f"tm.{d}.{level}."
                tm.load_state_dict({k[len(prefix):]: v for k, v in self.tensors.items()
                                    if k.startswith(prefix)}, strict=True)
                pair.append(tm)
            store.put(d, pair)
        return store


def save_bundle(bundle: CheckpointBundle, path) -> Path:
    """Write ``manifest.json`` and ``blobs/*.bin``; the manifest goes last."""
    path = Path(path)
    (path / "blobs").mkdir(parents=True, exist_ok=True)
    index = {}
    for key, tensor in bundle.tensors.items():
        blob = encode_tensor(tensor)
        fname = _file_name(key)
        (path / "blobs" / fname).write_bytes(blob)
        index[key] = {"file": f"blobs/{fname}", "shape": list(tensor.shape),
                      "dtype": "float32", "crc32": zlib.crc32(blob)}
    manifest = {
        "version": BUNDLE_VERSION,
        "config_hash": bundle.config_hash,
        "domain_names": bundle.domain_names,
        "completed_domain": bundle.completed_domain,
        "tm_domains": list(bundle.tm_domains),
        "tm_branches": {str(d): b for d, b in bundle.tm_branches.items()},
        "discriminators": [],
        "experiment": bundle.experiment,
        "history": bundle.history.to_json() if bundle.history is not None else None,
        "tensors": index,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path / "manifest.json")
    return path


def load_bundle(path) -> CheckpointBundle:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != BUNDLE_VERSION:
        raise CheckpointError(
            f"bundle version {manifest.get('version')!r} is not supported (expected {BUNDLE_VERSION})")
    if config_hash(manifest["experiment"]) != manifest["config_hash"]:
        raise CheckpointError("manifest config hash does not match its embedded configuration")
    tensors = {}
    for key, entry in manifest["tensors"].items():
        blob_path = path / entry["file"]
        if not blob_path.exists():
            raise CheckpointError(f"blob {entry['file']} is missing")
        blob = blob_path.read_bytes()
        if zlib.crc32(blob) != entry["crc32"]:
            raise CheckpointError(f"CRC32 mismatch in blob {entry['file']}")
        tensor = decode_tensor(blob, entry["file"])
        if list(tensor.shape) != entry["shape"]:
            raise CheckpointError(f"blob {entry['file']} shape differs from the manifest")
        tensors[key] = tensor
    history = manifest.get("history")
    return CheckpointBundle(
        experiment=manifest["experiment"],
        tensors=tensors,
        tm_domains=[int(d) for d in manifest["tm_domains"]],
        tm_branches={int(d): b for d, b in manifest["tm_branches"].items()},
        history=RunHistory.from_json(history) if history is not None else None,
        completed_domain=manifest["completed_domain"],
    )
