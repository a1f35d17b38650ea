"""Environment map library for EnvRef leaves.

Eight procedural lat-long images ship with the package (gradient skies,
checkers, stripes, studio spots).  They are generated from closed-form
pixel formulas, so the library is deterministic and needs no binary
assets.  A directory of lat-long PNGs can replace it (CLI --env-dir or the
SHADETREE_ENV_DIR variable); files are assigned indices in sorted name
order.
"""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import UnknownEnvIndex

ENV_DIR_VAR = "SHADETREE_ENV_DIR"
DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 128


def _grid(height: int, width: int):
    """Latitude in [-pi/2, pi/2] (rows) and longitude in [-pi, pi] (cols)."""
    lat = (np.arange(height) + 0.5) / height * np.pi - np.pi / 2
    lon = (np.arange(width) + 0.5) / width * 2 * np.pi - np.pi
    return np.meshgrid(lat, lon, indexing="ij")


def _mix3(t, low, high):
    t = np.clip(t, 0.0, 1.0)[..., None]
    return (1 - t) * np.asarray(low) + t * np.asarray(high)


def _sky_gradient(lat, lon):
    t = (np.sin(lat) + 1) / 2
    return _mix3(t, (0.85, 0.55, 0.30), (0.10, 0.20, 0.55))


def _horizon_split(lat, lon):
    t = 1 / (1 + np.exp(-lat / 0.08))
    return _mix3(t, (0.18, 0.14, 0.10), (0.70, 0.78, 0.92))


def _checker(lat, lon):
    cells = (np.floor((lon + np.pi) / (np.pi / 4)) +
             np.floor((lat + np.pi / 2) / (np.pi / 4))) % 2
    return _mix3(cells, (0.15, 0.15, 0.18), (0.82, 0.80, 0.75))


def _stripes(lat, lon):
    band = (np.floor((lon + np.pi) / (np.pi / 3)) % 2)
    return _mix3(band, (0.55, 0.25, 0.12), (0.92, 0.78, 0.45))


def _sunset(lat, lon):
    base = _mix3((np.sin(lat) + 1) / 2, (0.95, 0.55, 0.25), (0.25, 0.10, 0.35))
    glow = np.exp(-((lat + 0.15) ** 2) / 0.05 - (lon - 0.8) ** 2 / 0.5)
    return np.clip(base + glow[..., None] * np.array((0.9, 0.55, 0.2)), 0, 1)


def _two_tone(lat, lon):
    t = 1 / (1 + np.exp(-np.sin(lon) / 0.25))
    return _mix3(t, (0.20, 0.45, 0.50), (0.85, 0.70, 0.40))


def _studio(lat, lon):
    img = np.full(lat.shape + (3,), 0.06)
    spots = [(0.5, -1.2, 0.10, (1.0, 0.98, 0.92)),
             (0.1, 1.6, 0.06, (0.85, 0.88, 1.0)),
             (-0.7, 0.3, 0.16, (0.55, 0.52, 0.50))]
    for slat, slon, width, color in spots:
        d2 = (lat - slat) ** 2 + (np.angle(np.exp(1j * (lon - slon)))) ** 2
        img += np.exp(-d2 / width)[..., None] * np.asarray(color)
    return np.clip(img, 0, 1)


def _hue_sweep(lat, lon):
    phase = lon + 0.5 * lat
    rgb = np.stack([0.5 + 0.45 * np.sin(phase),
                    0.5 + 0.45 * np.sin(phase + 2.094),
                    0.5 + 0.45 * np.sin(phase + 4.189)], axis=-1)
    return np.clip(rgb, 0, 1)


_BUILTINS = (_sky_gradient, _horizon_split, _checker, _stripes,
             _sunset, _two_tone, _studio, _hue_sweep)


class EnvLibrary:
    """Indexed set of lat-long environment images (float RGB in [0,1])."""

    def __init__(self, maps: list[np.ndarray], names: list[str]):
        if len(maps) != len(names):
            raise ValueError("maps and names must have equal length")
        self.maps = []
        for m in maps:
            m = np.asarray(m, dtype=np.float64)
            m.flags.writeable = False
            self.maps.append(m)
        self.names = list(names)

    def __len__(self) -> int:
        return len(self.maps)

    def get(self, index: int) -> np.ndarray:
        if not (0 <= index < len(self.maps)):
            raise UnknownEnvIndex(
                f"environment index {index} outside library of {len(self.maps)}")
        return self.maps[index]

    @classmethod
    def builtin(cls, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> "EnvLibrary":
        lat, lon = _grid(height, width)
        maps = [np.ascontiguousarray(fn(lat, lon)) for fn in _BUILTINS]
        names = [fn.__name__.lstrip("_") for fn in _BUILTINS]
        return cls(maps, names)

    @classmethod
    def from_dir(cls, directory) -> "EnvLibrary":
        from .image import from_uint8
        from PIL import Image

        paths = sorted(Path(directory).glob("*.png"))
        if not paths:
            raise UnknownEnvIndex(f"no .png environment maps in {directory}")
        maps = [from_uint8(np.asarray(Image.open(p).convert("RGB"))) for p in paths]
        return cls(maps, [p.stem for p in paths])


@lru_cache(maxsize=1)
def _builtin_cached() -> EnvLibrary:
    return EnvLibrary.builtin()


def default_library() -> EnvLibrary:
    """Builtin library, unless SHADETREE_ENV_DIR points at a PNG directory."""
    override = os.environ.get(ENV_DIR_VAR)
    if override:
        return EnvLibrary.from_dir(override)
    return _builtin_cached()


@lru_cache(maxsize=4)
def load_latlong(path: str) -> np.ndarray:
    """Load an arbitrary lat-long PNG for EnvRef(path=...) leaves."""
    from PIL import Image
    from .image import from_uint8

    arr = np.asarray(Image.open(path).convert("RGB"))
    out = from_uint8(arr)
    out.flags.writeable = False
    return out
