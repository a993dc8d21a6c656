"""Printer-gamut operators used to lock palette colors.

A gamut operator maps an sRGB color (8-bit units, float) to the closest
printable color, expressed again in sRGB 8-bit units. Two operators ship:

* :class:`InkLimitGamut` - analytic RGB -> CMYK -> RGB round trip with a
  total-ink cap.
* :class:`LutGamut` - a user supplied 3D lookup table (``GLUT1`` files),
  trilinearly interpolated. Use this to plug in a real ICC transform baked
  offline.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

LUT_MAGIC = b"GLUT1"


class GamutOperator:
    """Base class; subclasses implement :meth:`__call__` on ``(..., 3)`` arrays."""

    gamut_id: str = "identity"

    def __call__(self, rgb):
        return np.asarray(rgb, dtype=np.float64)


def rgb_to_cmyk(rgb):
    """Naive sRGB (0-255) to CMYK (0-1) conversion, vectorized over the last axis."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    k = 1.0 - rgb.max(axis=-1)
    denom = 1.0 - k
    safe = np.where(denom > 0, denom, 1.0)
    cmy = (1.0 - rgb - k[..., None]) / safe[..., None]
    cmy = np.where((denom > 0)[..., None], cmy, 0.0)
    return np.concatenate([np.clip(cmy, 0.0, 1.0), k[..., None]], axis=-1)


def cmyk_to_rgb(cmyk):
    cmyk = np.asarray(cmyk, dtype=np.float64)
    k = cmyk[..., 3:4]
    return 255.0 * (1.0 - cmyk[..., :3]) * (1.0 - k)


class InkLimitGamut(GamutOperator):
    """Analytic CMYK round trip with total ink ``C+M+Y+K <= ink_limit``.

    Ink in excess of the limit is removed by scaling C, M and Y by a common
    factor; K is left untouched. The projection is idempotent.
    """

    def __init__(self, ink_limit=3.0):
        if ink_limit <= 0:
            raise ValueError(f"ink_limit must be positive, got {ink_limit}")
        self.ink_limit = float(ink_limit)
        self.gamut_id = f"ink-limit-{self.ink_limit:g}"

    def __call__(self, rgb):
        cmyk = rgb_to_cmyk(rgb)
        cmy = cmyk[..., :3]
        k = cmyk[..., 3]
        total = cmy.sum(axis=-1) + k
        over = total > self.ink_limit
        cmy_sum = cmy.sum(axis=-1)
        scale = np.ones_like(total)
        ok = over & (cmy_sum > 0)
        scale[ok] = np.clip((self.ink_limit - k[ok]) / cmy_sum[ok], 0.0, 1.0)
        cmyk = np.concatenate([cmy * scale[..., None], k[..., None]], axis=-1)
        return cmyk_to_rgb(cmyk)


class LutGamut(GamutOperator):
    """Gamut operator backed by a 3D lookup table.

    ``table`` has shape ``(nr, ng, nb, 3)``; node ``(i, j, k)`` sits at the
    normalized input color ``(i/(nr-1), j/(ng-1), k/(nb-1))`` and stores the
    normalized output color. Inputs/outputs of :meth:`__call__` are 8-bit units.
    """

    def __init__(self, table, gamut_id="lut"):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 4 or table.shape[-1] != 3 or min(table.shape[:3]) < 2:
            raise ValueError(f"LUT must have shape (nr, ng, nb, 3) with dims >= 2, got {table.shape}")
        self.table = table
        self.gamut_id = gamut_id
        axes = [np.linspace(0.0, 1.0, n) for n in table.shape[:3]]
        self._interp = RegularGridInterpolator(axes, table, method="linear")

    def __call__(self, rgb):
        rgb = np.asarray(rgb, dtype=np.float64)
        flat = np.clip(rgb.reshape(-1, 3) / 255.0, 0.0, 1.0)
        out = self._interp(flat)
        return (255.0 * np.clip(out, 0.0, 1.0)).reshape(rgb.shape)

    @classmethod
    def identity(cls, n=17):
        g = np.linspace(0.0, 1.0, n)
        table = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)
        return cls(table, gamut_id=f"lut-identity-{n}")


def write_lut(path, table):
    """Write a ``GLUT1`` file: magic, three little-endian uint16 dims, float32 RGB triples."""
    table = np.asarray(table, dtype="<f4")
    nr, ng, nb, c = table.shape
    if c != 3:
        raise ValueError("LUT entries must be RGB triples")
    with open(path, "wb") as fh:
        fh.write(LUT_MAGIC)
        fh.write(struct.pack("<3H", nr, ng, nb))
        fh.write(np.ascontiguousarray(table).tobytes(order="C"))


def read_lut(path) -> LutGamut:
    path = Path(path)
    data = path.read_bytes()
    if data[:5] != LUT_MAGIC:
        raise ValueError(f"{path}: not a GLUT1 file")
    nr, ng, nb = struct.unpack("<3H", data[5:11])
    expected = nr * ng * nb * 3 * 4
    body = data[11:]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} bytes of table data, found {len(body)}")
    table = np.frombuffer(body, dtype="<f4").reshape(nr, ng, nb, 3)
    return LutGamut(table.astype(np.float64), gamut_id=f"lut:{path}")


def gamut_from_id(gamut_id: str) -> GamutOperator:
    """Rebuild a gamut operator from its identifier (as stored in parameter files)."""
    if gamut_id.startswith("ink-limit-"):
        return InkLimitGamut(float(gamut_id[len("ink-limit-"):]))
    if gamut_id.startswith("lut:"):
        return read_lut(gamut_id[4:])
    if gamut_id.startswith("lut-identity-"):
        return LutGamut.identity(int(gamut_id[len("lut-identity-"):]))
    if gamut_id == "identity":
        return GamutOperator()
    raise ValueError(f"unknown gamut operator {gamut_id!r}")
