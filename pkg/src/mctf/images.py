"""Binary PPM (P6) / PGM (P5) reading and writing."""
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_fields(blob, count):
    fields, pos = [], 0
    while len(fields) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        fields.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return fields, pos + 1


def decode_pnm(blob):
    """Return an H x W x 3 float32 array in [0, 1]. Grey images are replicated."""
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError("only binary PGM (P5) and PPM (P6) are supported")
    fields, pos = _header_fields(blob, 4)
    try:
        width, height, maxval = (int(f) for f in fields[1:4])
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError("invalid dimensions or maxval")
    chans = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * chans
    if len(blob) - pos < count * np.dtype(dtype).itemsize:
        raise ImageFormatError("raster data truncated")
    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    img = raster.reshape(height, width, chans).astype(np.float32) / np.float32(maxval)
    if chans == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def read_pnm(path):
    return decode_pnm(Path(path).read_bytes())


def encode_ppm(img):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_ppm(path, img):
    Path(path).write_bytes(encode_ppm(img))
