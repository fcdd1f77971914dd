"""MetaImage-style volume I/O.

Two-file layout on disk: a text header (`.mhd`) next to a little-endian raw
payload (`.raw`). A single-buffer form (header + ``ElementDataFile = LOCAL``
+ payload) is supported for in-memory transfer. Element types are limited to
8-bit unsigned (masks) and 32-bit float (fields).

Writes go to a temporary name and are atomically renamed, so a concurrent
reader never observes a partial file.
"""

from __future__ import annotations

import os

import numpy as np

from .grid import GridSpec

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}
_DTYPE_TO_ELEMENT = {
    np.dtype("u1"): "MET_UCHAR",
    np.dtype("<f4"): "MET_FLOAT",
}


class VolumeError(Exception):
    """Base class for volume file problems."""


class HeaderError(VolumeError):
    """Missing or malformed header key."""


class SizeMismatchError(VolumeError):
    """Payload length inconsistent with the declared dimensions."""


class UnsupportedElementTypeError(VolumeError):
    """Element type other than MET_UCHAR / MET_FLOAT."""


def _parse_header(text: str) -> dict:
    header = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderError(f"malformed header line: {line!r}")
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
    return header


def _grid_from_header(header: dict) -> tuple[GridSpec, np.dtype, str]:
    for key in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise HeaderError(f"header missing required key {key}")
    if header["NDims"] != "3":
        raise HeaderError(f"NDims must be 3, got {header['NDims']}")
    try:
        dims = tuple(int(x) for x in header["DimSize"].split())
        spacing = tuple(float(x) for x in header.get(
            "ElementSpacing", "1 1 1").split())
        origin = tuple(float(x) for x in header.get("Offset", "0 0 0").split())
    except ValueError as exc:
        raise HeaderError(f"non-numeric header value: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise HeaderError("DimSize/ElementSpacing/Offset must have 3 entries")
    etype = header["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(
            f"unsupported ElementType {etype} (want MET_UCHAR or MET_FLOAT)")
    try:
        grid = GridSpec(dims, spacing, origin)
    except ValueError as exc:
        raise HeaderError(str(exc)) from exc
    return grid, ELEMENT_TYPES[etype], header["ElementDataFile"]


def _decode_payload(grid: GridSpec, dtype: np.dtype, payload: bytes) -> np.ndarray:
    expected = grid.n_voxels * dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"payload is {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    # file order is x-fastest (Fortran); internal arrays are (nx,ny,nz) C-order
    return np.ascontiguousarray(
        flat.reshape(grid.dims[::-1]).transpose(2, 1, 0))


def _encode_payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values.transpose(2, 1, 0)).tobytes()


def _header_text(grid: GridSpec, element_type: str, data_file: str) -> str:
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    nx, ny, nz = grid.dims
    return (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {sx:.10g} {sy:.10g} {sz:.10g}\n"
        f"Offset = {ox:.10g} {oy:.10g} {oz:.10g}\n"
        f"ElementType = {element_type}\n"
        f"ElementDataFile = {data_file}\n"
    )


def _element_type_for(values: np.ndarray, element_type: str | None) -> tuple[str, np.ndarray]:
    if element_type is None:
        if values.dtype in _DTYPE_TO_ELEMENT:
            element_type = _DTYPE_TO_ELEMENT[values.dtype]
        elif np.issubdtype(values.dtype, np.integer) or values.dtype == np.bool_:
            element_type = "MET_UCHAR"
        else:
            element_type = "MET_FLOAT"
    if element_type not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(f"unsupported ElementType {element_type}")
    return element_type, values.astype(ELEMENT_TYPES[element_type])


def read_volume(path: str) -> tuple[GridSpec, np.ndarray]:
    """Read an .mhd header + raw payload pair; returns (grid, (nx,ny,nz) array)."""
    with open(path, "r") as fh:
        header = _parse_header(fh.read())
    grid, dtype, data_file = _grid_from_header(header)
    if data_file == "LOCAL":
        raise HeaderError("LOCAL payload not valid in a two-file header")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), data_file)
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    return grid, _decode_payload(grid, dtype, payload)


def write_volume(path: str, grid: GridSpec, values: np.ndarray,
                 element_type: str | None = None) -> None:
    """Write an .mhd/.raw pair; atomic with respect to concurrent readers."""
    values = np.asarray(values).reshape(grid.dims)
    element_type, values = _element_type_for(values, element_type)
    base = path[:-4] if path.endswith(".mhd") else path
    raw_name = os.path.basename(base) + ".raw"
    header = _header_text(grid, element_type, raw_name)
    payload = _encode_payload(values)
    for target, data, mode in ((base + ".raw", payload, "wb"),
                               (base + ".mhd", header, "w")):
        tmp = f"{target}.tmp{os.getpid()}"
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, target)


def volume_to_bytes(grid: GridSpec, values: np.ndarray,
                    element_type: str | None = None) -> bytes:
    """Single-buffer form: header with ElementDataFile = LOCAL then payload."""
    values = np.asarray(values).reshape(grid.dims)
    element_type, values = _element_type_for(values, element_type)
    header = _header_text(grid, element_type, "LOCAL")
    return header.encode("ascii") + _encode_payload(values)


def volume_from_bytes(buf: bytes) -> tuple[GridSpec, np.ndarray]:
    """Parse the single-buffer form produced by volume_to_bytes."""
    marker = b"ElementDataFile = LOCAL\n"
    pos = buf.find(marker)
    if pos < 0:
        raise HeaderError("buffer lacks 'ElementDataFile = LOCAL' terminator")
    split = pos + len(marker)
    try:
        header = _parse_header(buf[:split].decode("ascii"))
    except UnicodeDecodeError as exc:
        raise HeaderError("header is not ASCII text") from exc
    grid, dtype, _ = _grid_from_header(header)
    return grid, _decode_payload(grid, dtype, buf[split:])
