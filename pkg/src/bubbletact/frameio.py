"""Binary frame-file formats and run-record layout.

Every grid file starts with an exactly 32-byte ASCII header

    ``<MAGIC> <width> <height> <scale>\\n``

space-padded before the newline, followed by a little-endian row-major
payload. Variants:

======  =======  =====================================================
magic   payload  meaning
======  =======  =====================================================
BBLF1   uint16   depth; mm = value * scale / 1000 (scale is um/unit)
BBLI1   uint8    IR intensity; value / scale (scale is the max code)
BBLM1   uint8    binary mask, 0 or 1 (scale unused, written as 1)
BBLV1   int16    flow; two planes (all dx then all dy), px = value /
                 scale, invalid pixels hold INT16_MIN in both planes
======  =======  =====================================================

Ground-truth contact sets ride in a run-length-encoded sidecar:
``BBLC1 <width> <height> <nruns>\\n`` then ``nruns`` uint32 run lengths of
alternating value starting with False, row-major.

Depth quantization is part of the measurement contract: live runs feed the
perception pipeline through an encode/decode round trip, so replaying the
written files reproduces telemetry bit for bit.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError
from .images import ContactMask, DepthImage, FlowField, IrImage

HEADER_LEN = 32
DEPTH_SCALE_UM = 10        # 0.01 mm resolution, 655 mm range
IR_SCALE = 255
FLOW_SCALE = 1000          # milli-pixel resolution
FLOW_INVALID = np.int16(np.iinfo(np.int16).min)

PathOrIO = Union[str, Path, BinaryIO]


def _pack_header(magic: str, width: int, height: int, scale: int) -> bytes:
    text = f"{magic} {width} {height} {scale}"
    if len(text) > HEADER_LEN - 1:
        raise FormatError("header fields too long for the 32-byte header")
    return (text + " " * (HEADER_LEN - 1 - len(text)) + "\n").encode("ascii")


def _parse_header(raw: bytes, offset_base: int = 0):
    if len(raw) != HEADER_LEN:
        raise FormatError(
            f"truncated header: got {len(raw)} bytes at byte {offset_base}, "
            f"need {HEADER_LEN}"
        )
    if raw[-1:] != b"\n":
        raise FormatError(f"header missing newline at byte {offset_base + 31}")
    try:
        fields = raw[:-1].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError(f"non-ASCII header at byte {offset_base}") from exc
    if len(fields) != 4:
        raise FormatError(
            f"header needs 'MAGIC w h scale', got {raw[:-1]!r} at byte {offset_base}"
        )
    magic = fields[0]
    try:
        width, height, scale = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise FormatError(f"non-integer header field at byte {offset_base}") from exc
    if width <= 0 or height <= 0 or scale <= 0:
        raise FormatError(f"non-positive header field at byte {offset_base}")
    return magic, width, height, scale


def _open_write(dst: PathOrIO):
    if isinstance(dst, (str, Path)):
        return open(dst, "wb"), True
    return dst, False


def _open_read(src: PathOrIO):
    if isinstance(src, (str, Path)):
        return open(src, "rb"), True
    return src, False


def _read_payload(fh: BinaryIO, count: int, dtype: np.dtype) -> np.ndarray:
    expected = count * dtype.itemsize
    payload = fh.read(expected)
    if len(payload) != expected:
        raise FormatError(
            f"truncated payload: format error at byte {HEADER_LEN + len(payload)}"
        )
    extra = fh.read(1)
    if extra:
        raise FormatError(
            f"trailing data: format error at byte {HEADER_LEN + expected}"
        )
    return np.frombuffer(payload, dtype=dtype)


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

def encode_depth(image: DepthImage, scale_um: int = DEPTH_SCALE_UM) -> bytes:
    codes = np.round(image.values * 1000.0 / scale_um)
    if codes.min() < 0 or codes.max() > np.iinfo(np.uint16).max:
        raise FormatError("depth out of range for 16-bit encoding")
    buf = io.BytesIO()
    buf.write(_pack_header("BBLF1", image.width, image.height, scale_um))
    buf.write(codes.astype("<u2").tobytes())
    return buf.getvalue()


def write_depth(dst: PathOrIO, image: DepthImage,
                scale_um: int = DEPTH_SCALE_UM) -> None:
    fh, own = _open_write(dst)
    try:
        fh.write(encode_depth(image, scale_um))
    finally:
        if own:
            fh.close()


def read_depth(src: PathOrIO, timestamp: float = 0.0,
               pressure: float = 0.0) -> DepthImage:
    fh, own = _open_read(src)
    try:
        magic, width, height, scale = _parse_header(fh.read(HEADER_LEN))
        if magic != "BBLF1":
            raise FormatError(f"expected BBLF1, found {magic!r} at byte 0")
        codes = _read_payload(fh, width * height, np.dtype("<u2"))
    finally:
        if own:
            fh.close()
    values = codes.reshape(height, width).astype(np.float64) * scale / 1000.0
    return DepthImage(
        values=values, timestamp=timestamp, pressure_at_capture=pressure
    )


def depth_roundtrip(image: DepthImage) -> DepthImage:
    """Quantize a depth frame exactly as the on-disk format would."""
    out = read_depth(io.BytesIO(encode_depth(image)))
    out.timestamp = image.timestamp
    out.pressure_at_capture = image.pressure_at_capture
    return out


# ---------------------------------------------------------------------------
# IR
# ---------------------------------------------------------------------------

def encode_ir(image: IrImage) -> bytes:
    codes = np.round(image.values * IR_SCALE).astype("<u1")
    buf = io.BytesIO()
    buf.write(_pack_header("BBLI1", image.width, image.height, IR_SCALE))
    buf.write(codes.tobytes())
    return buf.getvalue()


def write_ir(dst: PathOrIO, image: IrImage) -> None:
    fh, own = _open_write(dst)
    try:
        fh.write(encode_ir(image))
    finally:
        if own:
            fh.close()


def read_ir(src: PathOrIO, timestamp: float = 0.0) -> IrImage:
    fh, own = _open_read(src)
    try:
        magic, width, height, scale = _parse_header(fh.read(HEADER_LEN))
        if magic != "BBLI1":
            raise FormatError(f"expected BBLI1, found {magic!r} at byte 0")
        codes = _read_payload(fh, width * height, np.dtype("<u1"))
    finally:
        if own:
            fh.close()
    values = codes.reshape(height, width).astype(np.float64) / scale
    return IrImage(values=values, timestamp=timestamp)


def ir_roundtrip(image: IrImage) -> IrImage:
    out = read_ir(io.BytesIO(encode_ir(image)))
    out.timestamp = image.timestamp
    return out


# ---------------------------------------------------------------------------
# mask / flow debug dumps
# ---------------------------------------------------------------------------

def write_mask(dst: PathOrIO, mask: ContactMask) -> None:
    fh, own = _open_write(dst)
    try:
        fh.write(_pack_header("BBLM1", mask.width, mask.height, 1))
        fh.write(mask.values.astype("<u1").tobytes())
    finally:
        if own:
            fh.close()


def read_mask(src: PathOrIO) -> ContactMask:
    fh, own = _open_read(src)
    try:
        magic, width, height, _ = _parse_header(fh.read(HEADER_LEN))
        if magic != "BBLM1":
            raise FormatError(f"expected BBLM1, found {magic!r} at byte 0")
        codes = _read_payload(fh, width * height, np.dtype("<u1"))
    finally:
        if own:
            fh.close()
    return ContactMask(values=codes.reshape(height, width) != 0)


def write_flow(dst: PathOrIO, flow: FlowField) -> None:
    h, w = flow.valid.shape
    dx = np.round(flow.vectors[..., 0] * FLOW_SCALE)
    dy = np.round(flow.vectors[..., 1] * FLOW_SCALE)
    limit = np.iinfo(np.int16).max
    dx = np.clip(dx, -limit, limit).astype("<i2")
    dy = np.clip(dy, -limit, limit).astype("<i2")
    dx[~flow.valid] = FLOW_INVALID
    dy[~flow.valid] = FLOW_INVALID
    fh, own = _open_write(dst)
    try:
        fh.write(_pack_header("BBLV1", w, h, FLOW_SCALE))
        fh.write(dx.tobytes())
        fh.write(dy.tobytes())
    finally:
        if own:
            fh.close()


def read_flow(src: PathOrIO) -> FlowField:
    fh, own = _open_read(src)
    try:
        magic, width, height, scale = _parse_header(fh.read(HEADER_LEN))
        if magic != "BBLV1":
            raise FormatError(f"expected BBLV1, found {magic!r} at byte 0")
        codes = _read_payload(fh, 2 * width * height, np.dtype("<i2"))
    finally:
        if own:
            fh.close()
    dx = codes[: width * height].reshape(height, width)
    dy = codes[width * height :].reshape(height, width)
    valid = (dx != FLOW_INVALID) & (dy != FLOW_INVALID)
    vectors = np.stack(
        [
            np.where(valid, dx, 0).astype(np.float64) / scale,
            np.where(valid, dy, 0).astype(np.float64) / scale,
        ],
        axis=-1,
    )
    return FlowField(vectors=vectors, valid=valid)


# ---------------------------------------------------------------------------
# ground-truth contact sidecar (1-bit RLE)
# ---------------------------------------------------------------------------

def write_contact_rle(dst: PathOrIO, contact: np.ndarray) -> None:
    contact = np.asarray(contact, dtype=bool)
    h, w = contact.shape
    flat = contact.ravel()
    # run lengths of alternating value, starting with False
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:  # leading True needs an explicit zero-length False run
        runs = np.concatenate([[0], runs])
    fh, own = _open_write(dst)
    try:
        fh.write(_pack_header("BBLC1", w, h, len(runs)))
        fh.write(runs.astype("<u4").tobytes())
    finally:
        if own:
            fh.close()


def read_contact_rle(src: PathOrIO) -> np.ndarray:
    fh, own = _open_read(src)
    try:
        magic, width, height, nruns = _parse_header(fh.read(HEADER_LEN))
        if magic != "BBLC1":
            raise FormatError(f"expected BBLC1, found {magic!r} at byte 0")
        runs = _read_payload(fh, nruns, np.dtype("<u4"))
    finally:
        if own:
            fh.close()
    total = int(runs.sum())
    if total != width * height:
        raise FormatError(
            f"run lengths cover {total} px, grid needs {width * height}: "
            f"format error at byte {HEADER_LEN}"
        )
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += int(run)
        value = not value
    return flat.reshape(height, width)
