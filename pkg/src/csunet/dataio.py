"""Binary volume/checkpoint persistence, dataset manifests, phantom generator.

Volume files ("CSUV") hold one (C, D, H, W) array: a 25-byte header (magic,
version u32, dtype code u8, four extent u32) followed by the raw little-endian
row-major payload. Checkpoints ("CSUC") embed the network config as a
length-prefixed JSON blob followed by one record per registry entry. Every
malformed-input class raises its own error type, and all writes go through a
temp file plus atomic rename.

The phantom generator replaces real CT data at desk scale: a noisy volume
with one spherical nodule of configurable contrast (solid vs ground-glass)
and a 1-voxel cosine-smoothed rim.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .network import ConfigError, NetworkConfig, build_network

VOLUME_MAGIC = b"CSUV"
CHECKPOINT_MAGIC = b"CSUC"
FORMAT_VERSION = 1
VOLUME_HEADER = struct.Struct("<4sIB4I")  # magic, version, dtype code, C/D/H/W
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class VolumeFormatError(ValueError):
    """Base for malformed binary container input."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class ManifestError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


def _atomic_write(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Offset cursor over bytes; short reads raise TruncatedFileError."""

    def __init__(self, blob, what):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n):
        end = self.pos + n
        if end > len(self.blob):
            raise TruncatedFileError(f"{self.what}: needed {n} bytes at offset {self.pos}, file ends at {len(self.blob)}")
        out = self.blob[self.pos : end]
        self.pos = end
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    @property
    def exhausted(self):
        return self.pos == len(self.blob)


def write_volume(path, array):
    """Write a (C, D, H, W) float32 or uint8 array atomically."""
    array = np.asarray(array)
    if array.ndim != 4:
        raise ValueError(f"volumes are (C, D, H, W); got {array.ndim} axes")
    code = _CODE_FOR_DTYPE.get(array.dtype)
    if code is None:
        raise ValueError(f"volumes store float32 or uint8, got {array.dtype}")
    header = VOLUME_HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, code, *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes()
    _atomic_write(path, header + payload)


def _parse_volume_header(blob, what):
    if len(blob) < VOLUME_HEADER.size:
        raise TruncatedFileError(f"{what}: shorter than the {VOLUME_HEADER.size}-byte header")
    magic, version, code, c, d, h, w = VOLUME_HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise BadMagicError(f"{what}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{what}: unsupported version {version}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise UnsupportedDtypeError(f"{what}: unknown dtype code {code}")
    return dtype, (c, d, h, w)


def read_volume_header(path):
    """Read just the header; returns (numpy dtype, (C, D, H, W))."""
    with open(path, "rb") as f:
        blob = f.read(VOLUME_HEADER.size)
    return _parse_volume_header(blob, os.fspath(path))


def read_volume(path):
    """Exact inverse of write_volume; returns the stored array."""
    with open(path, "rb") as f:
        blob = f.read()
    what = os.fspath(path)
    dtype, shape = _parse_volume_header(blob, what)
    expect = int(np.prod(shape)) * dtype.itemsize
    payload = blob[VOLUME_HEADER.size :]
    if len(payload) != expect:
        raise TruncatedFileError(f"{what}: payload is {len(payload)} bytes, header promises {expect}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# synthetic nodule phantoms


@dataclass
class PhantomSpec:
    extent: int = 32
    radius: float = 3.0
    center: tuple | None = None
    contrast: float = 0.8
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self):
        if self.extent < 8:
            raise ConfigError(f"phantom extent must be >= 8, got {self.extent}")
        if not 2.0 <= self.radius <= self.extent / 4:
            raise ConfigError(f"phantom radius must be in [2, extent/4], got {self.radius}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        return self


def generate_phantom(spec):
    """One noisy volume with a spherical nodule; returns (image, mask).

    image: (1, E, E, E) float32 = N(0, sigma) noise + contrast * profile,
    where the profile is 1 inside ``radius``, cosine-tapered over a 1-voxel
    rim, 0 beyond. mask: (E, E, E) uint8, 1 exactly where the center
    distance is <= radius. Deterministic from the seed; the center is drawn
    before the noise so the same seed always places the same nodule.
    """
    spec.validate()
    e, r = spec.extent, spec.radius
    rng = np.random.default_rng(spec.seed)
    lo, hi = r + 1.0, e - 1.0 - (r + 1.0)
    if lo > hi:
        raise ConfigError(f"sphere of radius {r} does not fit in extent {e}")
    if spec.center is None:
        center = rng.uniform(lo, hi, size=3)
    else:
        center = np.asarray(spec.center, dtype=np.float64)
        if center.shape != (3,):
            raise ConfigError(f"phantom center must be a 3-vector, got shape {center.shape}")
        if np.any(center < lo) or np.any(center > hi):
            raise ConfigError(f"sphere of radius {r} at {tuple(center)} does not fit in extent {e}")

    grid = np.indices((e, e, e), dtype=np.float64)
    dist = np.sqrt(((grid - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    profile = np.where(
        dist <= r,
        1.0,
        np.where(dist <= r + 1.0, 0.5 * (1.0 + np.cos(math.pi * (dist - r))), 0.0),
    )
    image = rng.normal(0.0, spec.noise_sigma, size=(e, e, e)) + spec.contrast * profile
    mask = (dist <= r).astype(np.uint8)
    return image.astype(np.float32)[None], mask


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class VolumeRecord:
    id: str
    image_path: str
    mask_path: str
    extent: int
    fold: int | None = None
    contrast: float | None = None


@dataclass
class DatasetManifest:
    samples: list
    screening: str = ""


def _validate_pair(record):
    """Check both file headers of one record; returns the cubic extent."""
    for role, path in (("image", record.image_path), ("mask", record.mask_path)):
        if not os.path.exists(path):
            raise ManifestError(f"sample {record.id!r}: {role} file {path} is missing")
    idtype, ishape = read_volume_header(record.image_path)
    mdtype, mshape = read_volume_header(record.mask_path)
    if ishape[1:] != mshape[1:]:
        raise ManifestError(f"sample {record.id!r}: image extents {ishape[1:]} != mask extents {mshape[1:]}")
    d, h, w = ishape[1:]
    if not d == h == w:
        raise ManifestError(f"sample {record.id!r}: extents {ishape[1:]} are not cubic")
    if idtype != np.dtype("float32"):
        raise ManifestError(f"sample {record.id!r}: image dtype is {idtype}, expected float32")
    if mdtype != np.dtype("uint8"):
        raise ManifestError(f"sample {record.id!r}: mask dtype is {mdtype}, expected uint8")
    return d


def build_manifest(directory, screening=""):
    """Scan a directory of <id>.image.csuv / <id>.mask.csuv pairs."""
    directory = os.fspath(directory)
    ids = sorted(
        name[: -len(".image.csuv")] for name in os.listdir(directory) if name.endswith(".image.csuv")
    )
    if not ids:
        raise ManifestError(f"no *.image.csuv files under {directory}")
    samples = []
    for sid in ids:
        rec = VolumeRecord(
            id=sid,
            image_path=os.path.join(directory, f"{sid}.image.csuv"),
            mask_path=os.path.join(directory, f"{sid}.mask.csuv"),
            extent=0,
        )
        rec.extent = _validate_pair(rec)
        samples.append(rec)
    return DatasetManifest(samples=samples, screening=screening)


def save_manifest(manifest, path):
    """Write manifest.json next to the volumes it references."""
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    rows = []
    for rec in manifest.samples:
        row = {
            "id": rec.id,
            "image": os.path.relpath(rec.image_path, base),
            "mask": os.path.relpath(rec.mask_path, base),
            "fold": rec.fold,
        }
        if rec.contrast is not None:
            row["contrast"] = rec.contrast
        rows.append(row)
    doc = {"samples": rows, "screening": manifest.screening}
    _atomic_write(path, json.dumps(doc, indent=2).encode("utf-8") + b"\n")


def load_manifest(path):
    """Parse and validate manifest.json; checks ids and every file header."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            doc = json.loads(f.read().decode("utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ManifestError(f"{path}: expected an object with a 'samples' list")
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    seen = set()
    for row in doc["samples"]:
        if not isinstance(row, dict) or not {"id", "image", "mask"} <= set(row):
            raise ManifestError(f"{path}: each sample needs id/image/mask, got {row!r}")
        sid = row["id"]
        if sid in seen:
            raise ManifestError(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        rec = VolumeRecord(
            id=sid,
            image_path=os.path.join(base, row["image"]),
            mask_path=os.path.join(base, row["mask"]),
            extent=0,
            fold=row.get("fold"),
            contrast=row.get("contrast"),
        )
        rec.extent = _validate_pair(rec)
        samples.append(rec)
    return DatasetManifest(samples=samples, screening=str(doc.get("screening", "")))


def load_samples(manifest):
    """Materialize (image, mask) pairs for training: (C,D,H,W) f32, (D,H,W) u8."""
    out = []
    for rec in manifest.samples:
        image = read_volume(rec.image_path)
        mask = read_volume(rec.mask_path)
        if mask.shape[0] != 1:
            raise ManifestError(f"sample {rec.id!r}: mask has {mask.shape[0]} channels, expected 1")
        mask = mask[0]
        if mask.max(initial=0) > 1:
            raise ManifestError(f"sample {rec.id!r}: mask values must be 0/1")
        out.append((image, mask))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net):
    """Serialize config + every registry entry (float32) atomically."""
    cfg_json = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [
        struct.pack("<4sI", CHECKPOINT_MAGIC, FORMAT_VERSION),
        struct.pack("<I", len(cfg_json)),
        cfg_json,
    ]
    for name, arr in net.named_state():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(chunks))


def checkpoint_size(net):
    """Closed-form byte size of a checkpoint of ``net``."""
    cfg_json = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    total = 8 + 4 + len(cfg_json)
    for name, arr in net.named_state():
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * arr.ndim + 4 * arr.size
    return total


def load_checkpoint(path, config=None):
    """Rebuild the network a checkpoint was saved from.

    With ``config`` given, the embedded config must match it exactly
    (CheckpointConfigError otherwise); with None the embedded one is used.
    The returned network is in eval mode.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    try:
        embedded = json.loads(r.take(r.u32()).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: embedded config is not valid JSON") from e
    try:
        net_config = NetworkConfig.from_dict(embedded)
    except ConfigError as e:
        raise CheckpointError(f"{path}: embedded config rejected: {e}") from e
    if config is not None and config.to_dict() != net_config.to_dict():
        raise CheckpointConfigError(f"{path}: checkpoint config {embedded} does not match the requested config")

    net = build_network(net_config)
    for name, arr in net.named_state():
        found = r.take(r.u32()).decode("utf-8")
        if found != name:
            raise CheckpointError(f"{path}: expected entry {name!r}, found {found!r}")
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        if shape != arr.shape:
            raise CheckpointError(f"{path}: entry {name!r} has shape {shape}, expected {arr.shape}")
        data = np.frombuffer(r.take(4 * arr.size), dtype="<f4").reshape(shape)
        np.copyto(arr, data.astype(arr.dtype, copy=False))
    if not r.exhausted:
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes after the last entry")
    net.eval()
    return net
