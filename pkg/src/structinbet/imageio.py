"""Netpbm (PGM/PPM) I/O for images stored as (C, H, W) floats in [-1, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    C, H, W = img.shape
    if C == 1:
        return f"P5\n{W} {H}\n255\n".encode("ascii") + to_uint8(img[0]).tobytes()
    if C == 3:
        return f"P6\n{W} {H}\n255\n".encode("ascii") + to_uint8(img.transpose(1, 2, 0)).tobytes()
    raise ValueError(f"cannot encode {C}-channel image")


def decode_image(buf: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(buf[start:pos])
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm supported, maxval={maxval}")
    C = {b"P5": 1, b"P6": 3}.get(magic)
    if C is None:
        raise ValueError(f"unsupported netpbm type {magic!r}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=W * H * C, offset=pos)
    if C == 1:
        return from_uint8(raw.reshape(1, H, W))
    return from_uint8(raw.reshape(H, W, 3).transpose(2, 0, 1))


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(img))


def read_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())
