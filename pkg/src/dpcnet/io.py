"""MVOL volume files and dataset manifests."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

MAGIC = b"MVOL1\n"
SPLITS = ("train", "val", "test")
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_KIND_DTYPE = {"image": "f32", "label": "u8"}


class MvolError(ValueError):
    """Malformed MVOL file."""


class BadMagicError(MvolError):
    pass


class TruncatedPayloadError(MvolError):
    pass


class DtypeMismatchError(MvolError):
    pass


class BadHeaderError(MvolError):
    pass


Spacing = Tuple[float, float, float]


@dataclass
class Volume:
    voxels: np.ndarray  # (D, H, W) float32
    spacing: Spacing = (1.0, 1.0, 1.0)
    intensity_unit: str = "HU"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing = _check_spacing(self.spacing)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if self.intensity_unit not in ("HU", "normalized"):
            raise ValueError(f"unknown intensity unit {self.intensity_unit!r}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelVolume:
    labels: np.ndarray  # (D, H, W) uint8
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("labels must fit in uint8")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume must be 3-D, got shape {self.labels.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp  # type: ignore[return-value]


def write_mvol(path: Union[str, os.PathLike], v: Union[Volume, LabelVolume]) -> None:
    if isinstance(v, Volume):
        kind, arr = "image", v.voxels
    elif isinstance(v, LabelVolume):
        kind, arr = "label", v.labels
    else:
        raise TypeError(f"cannot write {type(v).__name__}")
    dtype = _KIND_DTYPE[kind]
    header = {
        "dims": [int(n) for n in arr.shape],
        "spacing": [float(s) for s in v.spacing],
        "dtype": dtype,
        "kind": kind,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def parse_mvol(buf: bytes) -> Union[Volume, LabelVolume]:
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an MVOL file (bad magic)")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise TruncatedPayloadError("file ends inside the header length field")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + hlen:
        raise TruncatedPayloadError("file ends inside the JSON header")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadHeaderError(f"unreadable header: {exc}") from None
    pos += hlen
    if not isinstance(header, dict) or set(header) != {"dims", "spacing", "dtype", "kind"}:
        raise BadHeaderError(f"header must have exactly dims/spacing/dtype/kind, got {header!r}")
    dims, spacing, dtype, kind = header["dims"], header["spacing"], header["dtype"], header["kind"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n > 0 for n in dims)):
        raise BadHeaderError(f"bad dims {dims!r}")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise BadHeaderError(f"bad spacing {spacing!r}")
    if any(not isinstance(s, (int, float)) or s <= 0 for s in spacing):
        raise BadHeaderError(f"spacing must be positive, got {spacing!r}")
    if kind not in _KIND_DTYPE:
        raise BadHeaderError(f"unknown kind {kind!r}")
    if dtype not in _DTYPES or _KIND_DTYPE[kind] != dtype:
        raise DtypeMismatchError(f"kind {kind!r} requires dtype {_KIND_DTYPE[kind]!r}, got {dtype!r}")
    npdt = _DTYPES[dtype]
    need = int(np.prod(dims)) * npdt.itemsize
    have = len(buf) - pos
    if have < need:
        raise TruncatedPayloadError(f"payload has {have // npdt.itemsize} voxels, header declares {int(np.prod(dims))}")
    if have > need:
        raise MvolError(f"{have - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=npdt, count=int(np.prod(dims)), offset=pos).reshape(dims)
    if kind == "image":
        return Volume(arr.astype(np.float32), tuple(spacing))
    return LabelVolume(arr.copy(), tuple(spacing))


def read_mvol(path: Union[str, os.PathLike]) -> Union[Volume, LabelVolume]:
    with open(path, "rb") as fh:
        return parse_mvol(fh.read())


@dataclass
class ManifestEntry:
    image: Path
    label: Path
    split: str


def read_manifest(path: Union[str, os.PathLike]) -> List[ManifestEntry]:
    """Load a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("manifest must be a JSON array")
    base = path.parent
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or set(item) != {"image", "label", "split"}:
            raise ValueError(f"manifest entry {i} must have exactly image/label/split")
        if item["split"] not in SPLITS:
            raise ValueError(f"manifest entry {i}: unknown split {item['split']!r}")
        img, lab = base / item["image"], base / item["label"]
        for p in (img, lab):
            if not p.exists():
                raise FileNotFoundError(f"manifest entry {i}: {p} does not exist")
        entries.append(ManifestEntry(img, lab, item["split"]))
    return entries


def write_manifest(path: Union[str, os.PathLike], entries) -> None:
    rows = [{"image": str(e["image"]), "label": str(e["label"]), "split": e["split"]} for e in entries]
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")
