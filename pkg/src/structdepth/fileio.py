"""PFM and binary PGM readers/writers for depth maps, normal fields and masks.

PFM rows are stored bottom-to-top; the arrays returned here are top-to-bottom.
Written PFM files are always little-endian (scale -1.0).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import DepthMap, NormalField, as_depth_map

_WHITESPACE = b" \t\r\n\v\f"
_MAX_TOKEN = 64


class FormatError(ValueError):
    def __init__(self, kind, offset, detail=""):
        self.kind = kind
        self.offset = offset
        msg = f"{kind} at byte {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class PfmError(FormatError):
    pass


class PgmError(FormatError):
    pass


def _header_tokens(data: bytes, start: int, count: int, err, comments=False):
    """Read ``count`` whitespace-separated tokens; return them and the offset after the
    single whitespace byte that terminates the last one."""
    pos = start
    tokens = []
    n = len(data)
    for _ in range(count):
        while pos < n and (data[pos] in _WHITESPACE or (comments and data[pos] == ord("#"))):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        begin = pos
        while pos < n and data[pos] not in _WHITESPACE:
            pos += 1
            if pos - begin > _MAX_TOKEN:
                raise err("bad header", begin, "header token too long")
        if begin == pos:
            raise err("truncated header", pos)
        tokens.append((data[begin:pos], begin))
    if pos >= n or data[pos] not in _WHITESPACE:
        raise err("truncated header", pos, "missing whitespace after header")
    return tokens, pos + 1


def _positive_int(tok, err, what):
    raw, offset = tok
    if not raw.isdigit():
        raise err("bad header", offset, f"{what} is not a positive integer: {raw[:16]!r}")
    value = int(raw)
    if value < 1:
        raise err("bad header", offset, f"{what} must be >= 1")
    return value


def read_pfm(data: bytes) -> DepthMap | NormalField:
    """Parse PFM bytes: ``Pf`` gives a :class:`DepthMap`, ``PF`` a :class:`NormalField`."""
    data = bytes(data)
    magic = data[:2]
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise PfmError("bad magic", 0, f"expected b'Pf' or b'PF', got {magic!r}")
    if len(data) < 3 or data[2] not in _WHITESPACE:
        raise PfmError("bad magic", 2, "magic must be followed by whitespace")
    (w_tok, h_tok, s_tok), body = _header_tokens(data, 3, 3, PfmError)
    width = _positive_int(w_tok, PfmError, "width")
    height = _positive_int(h_tok, PfmError, "height")
    try:
        scale = float(s_tok[0].decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise PfmError("bad header", s_tok[1], f"scale is not a number: {s_tok[0][:16]!r}") from None
    if scale == 0.0:
        raise PfmError("zero scale", s_tok[1])
    if not np.isfinite(scale):
        raise PfmError("bad header", s_tok[1], "scale must be finite")

    need = width * height * channels * 4
    have = len(data) - body
    if have < need:
        raise PfmError("truncated payload", len(data), f"expected {need} payload bytes from byte {body}, got {have}")
    dtype = "<f4" if scale < 0 else ">f4"
    samples = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=body)
    with np.errstate(invalid="ignore"):  # signalling NaNs in the payload
        samples = samples.astype(np.float64).reshape(height, width, channels)[::-1]

    if channels == 1:
        return DepthMap.from_values(np.ascontiguousarray(samples[:, :, 0]))
    if not np.all(samples[:, :, 2] == 1.0):
        raise PfmError("not a normal field", body, "third component of every sample must be 1")
    return NormalField(np.ascontiguousarray(samples))


def write_pfm(obj) -> bytes:
    if isinstance(obj, NormalField):
        h, w = obj.height, obj.width
        header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
        payload = obj.vectors[::-1].astype("<f4")
    else:
        depth = as_depth_map(obj)
        h, w = depth.shape
        header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
        payload = np.where(depth.valid, depth.values, 0.0)[::-1].astype("<f4")
    return header + np.ascontiguousarray(payload).tobytes()


def _read_pgm(data: bytes):
    data = bytes(data)
    if data[:2] != b"P5":
        raise PgmError("bad magic", 0, f"expected b'P5', got {data[:2]!r}")
    if len(data) < 3 or data[2] not in _WHITESPACE + b"#":
        raise PgmError("bad magic", 2, "magic must be followed by whitespace")
    (w_tok, h_tok, m_tok), body = _header_tokens(data, 2, 3, PgmError, comments=True)
    width = _positive_int(w_tok, PgmError, "width")
    height = _positive_int(h_tok, PgmError, "height")
    maxval = _positive_int(m_tok, PgmError, "maxval")
    if maxval > 65535:
        raise PgmError("bad header", m_tok[1], f"maxval {maxval} exceeds 65535")
    nbytes = 2 if maxval > 255 else 1
    need = width * height * nbytes
    have = len(data) - body
    if have < need:
        raise PgmError("truncated payload", len(data), f"expected {need} payload bytes from byte {body}, got {have}")
    dtype = ">u2" if nbytes == 2 else "u1"
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=body).reshape(height, width)
    return raw, maxval, m_tok[1]


def read_pgm16(data: bytes, depth_scale: float = 0.001) -> DepthMap:
    """16-bit sensor depth: ``value = raw * depth_scale`` meters, raw 0 is a hole."""
    if not depth_scale > 0:
        raise ValueError(f"depth_scale must be positive, got {depth_scale}")
    raw, maxval, offset = _read_pgm(data)
    if maxval != 65535:
        raise PgmError("bad maxval", offset, f"16-bit depth needs maxval 65535, got {maxval}")
    values = raw.astype(np.float64) * depth_scale
    return DepthMap(values, raw > 0)


def read_pgm8(data: bytes) -> np.ndarray:
    raw, maxval, offset = _read_pgm(data)
    if maxval > 255:
        raise PgmError("bad maxval", offset, f"expected an 8-bit PGM, got maxval {maxval}")
    return raw.copy()


def write_pgm16(raw: np.ndarray) -> bytes:
    raw = np.asarray(raw)
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 65535:
        raise ValueError("16-bit PGM samples must be in [0, 65535]")
    h, w = raw.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + raw.astype(">u2").tobytes()


def depth_to_pgm16(depth: DepthMap, depth_scale: float = 0.001) -> bytes:
    """Quantize a depth map to sensor units; invalid pixels become 0."""
    depth = as_depth_map(depth)
    raw = np.where(depth.valid, np.rint(depth.values / depth_scale), 0)
    return write_pgm16(np.clip(raw, 0, 65535).astype(np.uint16))


def write_pgm8(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes()


def load_depth(path, depth_scale: float = 0.001) -> DepthMap:
    """Load a ``.pfm`` (meters) or 16-bit ``.pgm`` (sensor units) depth file."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".pgm":
        return read_pgm16(data, depth_scale)
    result = read_pfm(data)
    if not isinstance(result, DepthMap):
        raise PfmError("not a depth map", 0, f"{path} is a 3-channel PFM")
    return result
