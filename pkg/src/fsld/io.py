"""Binary containers for datasets (FSD1) and volumes (FSV1).

Both formats are: 4 magic bytes, a little-endian uint32 byte length, a
UTF-8 JSON header of that length, then raw complex samples as
little-endian IEEE-754 float64 pairs (re, im) in grid layout order.

FSD1 header keys: ``M, N, mask_radius, sigma, seed, interp_mode, poses,
ctfs`` where ``poses`` is a list of ``{"q": [4 floats], "t": [2 floats]}``
and ``ctfs`` a list of ``{"defocus", "amp_contrast", "b_factor"}`` (empty
list for CTF-free datasets).  The payload is ``N * M^2`` pixels,
image-major.  FSV1 has header ``{"M": M}`` and ``M^3`` voxels.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .forward import CtfParams, FourierVolume, ImageStack, Pose
from .grid import GridSpec

__all__ = [
    "write_dataset",
    "read_dataset",
    "write_volume",
    "read_volume",
    "file_digest",
]

_DATASET_MAGIC = b"FSD1"
_VOLUME_MAGIC = b"FSV1"


def _pack_header(header: dict) -> bytes:
    payload = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


def _read_header(f, magic: bytes, path) -> dict:
    got = f.read(4)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    raw_len = f.read(4)
    if len(raw_len) != 4:
        raise DataError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw_len)
    raw = f.read(hlen)
    if len(raw) != hlen:
        raise DataError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: invalid header JSON: {exc}") from exc


def _read_complex(f, count: int, path) -> np.ndarray:
    raw = f.read(count * 16)
    if len(raw) != count * 16:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<c16").astype(np.complex128)


def write_dataset(stack: ImageStack, path) -> Path:
    path = Path(path)
    header = {
        "M": stack.spec.M,
        "N": stack.n_images,
        "mask_radius": stack.mask_radius,
        "sigma": stack.sigma,
        "seed": stack.seed,
        "interp_mode": stack.mode,
        "poses": [{"q": p.q.tolist(), "t": p.t.tolist()} for p in stack.poses],
        "ctfs": [
            {"defocus": c.defocus, "amp_contrast": c.amp_contrast,
             "b_factor": c.b_factor}
            for c in (stack.ctfs or [])
        ],
    }
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(_pack_header(header))
        f.write(np.ascontiguousarray(stack.images, dtype="<c16").tobytes())
    return path


def read_dataset(path) -> ImageStack:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = _read_header(f, _DATASET_MAGIC, path)
            try:
                m = int(header["M"])
                n = int(header["N"])
                poses = [
                    Pose(q=np.array(p["q"]), t=np.array(p["t"]))
                    for p in header["poses"]
                ]
                ctf_list = [
                    CtfParams(
                        defocus=float(c["defocus"]),
                        amp_contrast=float(c["amp_contrast"]),
                        b_factor=float(c["b_factor"]),
                    )
                    for c in header["ctfs"]
                ]
                stack = ImageStack(
                    spec=GridSpec(m),
                    images=_read_complex(f, n * m * m, path).reshape(n, m * m),
                    poses=poses,
                    ctfs=ctf_list or None,
                    sigma=float(header["sigma"]),
                    seed=int(header["seed"]),
                    mask_radius=int(header["mask_radius"]),
                    mode=str(header["interp_mode"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed dataset header: {exc}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return stack


def write_volume(vol: FourierVolume, path) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_VOLUME_MAGIC)
        f.write(_pack_header({"M": vol.spec.M}))
        f.write(np.ascontiguousarray(vol.values, dtype="<c16").tobytes())
    return path


def read_volume(path) -> FourierVolume:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = _read_header(f, _VOLUME_MAGIC, path)
            try:
                m = int(header["M"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed volume header: {exc}") from exc
            values = _read_complex(f, m ** 3, path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return FourierVolume(values, GridSpec(m))


def file_digest(path) -> str:
    """64-bit content digest of a file, as 16 hex characters."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        while chunk := f.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()
