# dyslim/data_io.py
"""
The DYSL container and the objects stored in it.

Layout of every file:
    b"DYSL" | version (<u4) | header length (<u8) | canonical JSON header | payload (<f8)

Datasets store their trajectories as [trajectory][time][dim]. Checkpoints
store a manifest of (name, shape, byte offset) entries in the header and
the concatenated arrays in the payload.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from dyslim.errors import ContractError, FormatError, LengthMismatchError, UnsupportedVersionError

logger = logging.getLogger(__name__)

# --- Constants ---
MAGIC = b"DYSL"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
STD_FLOOR = 1e-8

Header = Dict[str, Any]


def canonical_json(document: Any) -> str:
    """Key-sorted, compact JSON. Identical content always gives identical text."""
    return json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


# --- Raw container ---

def write_container(path: str, header: Header, payload: np.ndarray) -> None:
    flat = np.ascontiguousarray(payload, dtype="<f8").ravel()
    header = dict(header, payload_count=int(flat.size), dtype="<f8")
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(flat.tobytes())
    logger.info(f"Wrote {path} ({flat.size} values)")


def _read_preamble(f, path: str) -> Header:
    raw = f.read(PREAMBLE.size)
    if len(raw) < PREAMBLE.size:
        raise FormatError(f"{path}: file too short for a DYSL preamble")
    magic, version, header_len = PREAMBLE.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} is not supported (max {FORMAT_VERSION})")
    header_bytes = f.read(header_len)
    if len(header_bytes) != header_len:
        raise LengthMismatchError(f"{path}: header truncated ({len(header_bytes)} of {header_len} bytes)")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}") from None
    if not isinstance(header, dict) or "payload_count" not in header:
        raise FormatError(f"{path}: header lacks payload_count")
    if header.get("dtype", "<f8") != "<f8":
        raise UnsupportedVersionError(f"{path}: payload dtype {header['dtype']} is not supported")
    return header


def read_header(path: str) -> Header:
    """Reads and validates the header only; the payload is never touched."""
    with open(path, "rb") as f:
        return _read_preamble(f, path)


def read_container(path: str) -> Tuple[Header, np.ndarray]:
    with open(path, "rb") as f:
        header = _read_preamble(f, path)
        raw = f.read()
    expected = 8 * int(header["payload_count"])
    if len(raw) != expected:
        raise LengthMismatchError(f"{path}: payload has {len(raw)} bytes, header declares {expected}")
    payload = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return header, payload


# --- Normalizer ---

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "Normalizer":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


def fit_normalizer(dataset: "TrajectoryDataset") -> Normalizer:
    """Per-dimension mean and population std over all trajectories and times."""
    if dataset.data.size == 0:
        raise ContractError("cannot fit a normalizer to an empty dataset")
    flat = dataset.data.reshape(-1, dataset.state_dim)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return Normalizer(mean, std)


# --- Datasets ---

@dataclass
class TrajectoryDataset:
    system: str
    dt: float
    data: np.ndarray
    config: Dict[str, Any] = field(default_factory=dict)
    normalizer: Optional[Normalizer] = None
    config_hash: Optional[str] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ContractError(f"dataset payload must be (n, T, D), got shape {self.data.shape}")
        if not self.dt > 0:
            raise ContractError(f"dataset dt must be positive, got {self.dt}")

    @property
    def n_trajectories(self) -> int:
        return int(self.data.shape[0])

    @property
    def steps(self) -> int:
        return int(self.data.shape[1])

    @property
    def state_dim(self) -> int:
        return int(self.data.shape[2])

    def header(self) -> Header:
        return {
            "kind": "dataset",
            "system": self.system,
            "state_dim": self.state_dim,
            "n_trajectories": self.n_trajectories,
            "steps_per_trajectory": self.steps,
            "dt": float(self.dt),
            "config": self.config,
            "normalizer": self.normalizer.to_dict() if self.normalizer is not None else None,
            "config_hash": self.config_hash,
        }


def write_dataset(dataset: TrajectoryDataset, path: str) -> None:
    write_container(path, dataset.header(), dataset.data)


def read_dataset(path: str) -> TrajectoryDataset:
    header, payload = read_container(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: container holds '{header.get('kind')}', not a dataset")
    shape = (int(header["n_trajectories"]), int(header["steps_per_trajectory"]), int(header["state_dim"]))
    if int(np.prod(shape)) != payload.size:
        raise LengthMismatchError(f"{path}: header shape {shape} does not match {payload.size} payload values")
    normalizer = Normalizer.from_dict(header["normalizer"]) if header.get("normalizer") else None
    return TrajectoryDataset(
        system=header["system"],
        dt=float(header["dt"]),
        data=payload.reshape(shape),
        config=header.get("config") or {},
        normalizer=normalizer,
        config_hash=header.get("config_hash"),
    )


# --- Checkpoints ---

def write_checkpoint(path: str, header: Header, arrays: List[Tuple[str, np.ndarray]]) -> None:
    """
    Stores named arrays back to back. The manifest in the header records
    name, shape and byte offset of every entry so a reader can slice the
    payload without any other knowledge.
    """
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel())
        offset += 8 * arr.size
    payload = np.concatenate(chunks) if chunks else np.zeros(0)
    write_container(path, dict(header, kind="checkpoint", manifest=manifest), payload)


def read_checkpoint(path: str) -> Tuple[Header, Dict[str, np.ndarray]]:
    header, payload = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container holds '{header.get('kind')}', not a checkpoint")
    arrays = {}
    for entry in header.get("manifest", []):
        start = int(entry["offset"]) // 8
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if start + count > payload.size:
            raise LengthMismatchError(f"{path}: manifest entry '{entry['name']}' runs past the payload")
        arrays[entry["name"]] = payload[start:start + count].reshape(entry["shape"])
    return header, arrays


def config_hash(document: Any) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON of a resolved config."""
    return hashlib.sha256(canonical_json(document).encode("utf-8")).hexdigest()[:16]
