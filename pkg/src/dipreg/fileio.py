"""Image, displacement-field and report files.

Every writer goes through :func:`atomic_write`, which writes a temporary file
next to the destination and renames it into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"DIPF"
FIELD_VERSION = 1
# magic, version, reserved, height, width
_FIELD_HEADER = struct.Struct("<4sHHII")


class FormatError(ValueError):
    """A file exists but its contents do not match the expected format."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_bytes()


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated header integers after the magic;
    return them and the offset of the single whitespace byte that ends the header."""
    values: list[int] = []
    pos = 2
    while len(values) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed PGM header at byte offset {start}")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"malformed PGM header at byte offset {pos}")
    return values, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Binary (P5) 8-bit PGM to an H x W uint8 array."""
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM file (expected magic 'P5' at byte offset 0)")
    (width, height, maxval), offset = _pgm_tokens(buf, 3)
    if maxval < 1 or maxval > 255:
        raise FormatError(f"only 8-bit PGM is supported, maxval is {maxval}")
    expected = width * height
    payload = buf[offset:offset + expected]
    if len(payload) < expected:
        raise FormatError(
            f"truncated PGM: expected {expected} pixel bytes from offset {offset}, "
            f"file ends at byte offset {len(buf)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM expects an H x W array, got shape {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale P5 PGM or a PNG as a 1 x H x W array in [0, 1]."""
    buf = _read_bytes(path)
    if buf[:2] == b"P5":
        pixels = decode_pgm(buf)
    elif buf[:8] == b"\x89PNG\r\n\x1a\n":
        from io import BytesIO

        from PIL import Image

        try:
            with Image.open(BytesIO(buf)) as im:
                im.load()
                if im.mode not in ("L", "I;16", "I"):
                    im = im.convert("L")
                pixels = np.asarray(im)
        except (OSError, SyntaxError) as exc:
            raise FormatError(f"unreadable PNG {path}: {exc}") from exc
        if pixels.dtype != np.uint8:
            raise FormatError(f"only 8-bit PNG is supported, {path} has dtype {pixels.dtype}")
    else:
        raise FormatError(f"unsupported image format for {path}: expected P5 PGM or PNG")
    return (pixels.astype(np.float64) / 255.0)[None]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    """Write a [0, 1] image (H x W or 1 x H x W) as PGM, or as PNG when the
    suffix is ``.png``."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError(f"save_image expects one channel, got shape {a.shape}")
        a = a[0]
    pixels = to_uint8(a)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from io import BytesIO

        from PIL import Image

        out = BytesIO()
        Image.fromarray(pixels, mode="L").save(out, format="PNG")
        atomic_write(path, out.getvalue())
    else:
        atomic_write(path, encode_pgm(pixels))


def encode_field(u: np.ndarray) -> bytes:
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[0] != 2:
        raise ValueError(f"displacement field must be 2 x H x W, got shape {u.shape}")
    _, h, w = u.shape
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, 0, h, w)
    return header + np.ascontiguousarray(u, dtype="<f4").tobytes()


def decode_field(buf: bytes) -> np.ndarray:
    if len(buf) < _FIELD_HEADER.size:
        raise FormatError(f"field file too short for its {_FIELD_HEADER.size}-byte header")
    magic, version, _, h, w = _FIELD_HEADER.unpack_from(buf)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad field magic {magic!r}, expected {FIELD_MAGIC!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"unsupported field version {version}, expected {FIELD_VERSION}")
    expected = _FIELD_HEADER.size + 8 * h * w
    if len(buf) != expected:
        raise FormatError(f"field payload length mismatch: file has {len(buf)} bytes, "
                          f"header implies {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FIELD_HEADER.size)
    return data.reshape(2, h, w).astype(np.float64)


def save_field(path, u: np.ndarray) -> None:
    atomic_write(path, encode_field(u))


def load_field(path) -> np.ndarray:
    return decode_field(_read_bytes(path))


def detj_preview(det: np.ndarray) -> np.ndarray:
    """det J clipped to [0, 2] and mapped linearly onto [0, 1] for display."""
    return np.clip(np.asarray(det, dtype=np.float64), 0.0, 2.0) / 2.0


def save_detj(path, det: np.ndarray) -> Path:
    """Write the preview image at ``path`` and the raw float64 map to a ``.npy``
    sidecar with the same stem; returns the sidecar path."""
    path = Path(path)
    save_image(path, detj_preview(det))
    sidecar = path.with_suffix(".npy")
    from io import BytesIO

    out = BytesIO()
    np.save(out, np.asarray(det, dtype=np.float64))
    atomic_write(sidecar, out.getvalue())
    return sidecar


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_json(path, obj) -> None:
    atomic_write(path, dumps_json(obj).encode("utf-8"))


def save_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text
