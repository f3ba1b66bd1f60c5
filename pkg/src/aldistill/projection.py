"""Spherical projection of LiDAR point clouds onto fixed-size range images.

Images are stored row-major as ``(height, width, K)`` arrays: row ``v`` is the
elevation bin (row 0 looks up at ``fov_up``) and column ``u`` the azimuth bin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import FormatError, NumericError
from .scan_io import LabeledPointCloud

IGNORE = -1
SENTINEL = -1.0
DEFAULT_CHANNELS = ("x", "y", "r", "remission")
ALL_CHANNELS = ("x", "y", "z", "r", "remission")


@dataclass(frozen=True)
class SensorConfig:
    width: int = 64
    height: int = 16
    fov_up: float = float(np.radians(3.0))
    fov_down: float = float(np.radians(25.0))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if self.fov_up < 0 or self.fov_down < 0:
            raise ValueError("fov_up and fov_down are non-negative angles")
        if not self.fov > 0:
            raise ValueError("fov_up + fov_down must be > 0")

    @property
    def fov(self):
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, width, height, fov_up_deg, fov_down_deg):
        return cls(int(width), int(height), float(np.radians(fov_up_deg)), float(np.radians(fov_down_deg)))

    def row_elevation(self, v):
        """Elevation (radians) at the centre of row ``v``."""
        return self.fov_up - (np.asarray(v) + 0.5) * self.fov / self.height


@dataclass
class RangeImage:
    channels: np.ndarray
    labels: np.ndarray
    instances: np.ndarray
    valid: np.ndarray
    channel_set: tuple[str, ...] = DEFAULT_CHANNELS
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def height(self):
        return self.valid.shape[0]

    @property
    def width(self):
        return self.valid.shape[1]

    def channel(self, name) -> np.ndarray:
        try:
            return self.channels[..., self.channel_set.index(name)]
        except ValueError:
            raise KeyError(f"channel {name!r} not in {self.channel_set}") from None

    def copy(self) -> "RangeImage":
        return RangeImage(
            self.channels.copy(), self.labels.copy(), self.instances.copy(),
            self.valid.copy(), self.channel_set, dict(self.meta),
        )

    def invalidate(self, mask):
        """Set pixels in ``mask`` to the invalid sentinel state (in place)."""
        self.channels[mask] = SENTINEL
        self.labels[mask] = IGNORE
        self.instances[mask] = 0
        self.valid &= ~mask

    def equals(self, other: "RangeImage") -> bool:
        return (
            self.channel_set == other.channel_set
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.instances, other.instances)
            and np.array_equal(self.valid, other.valid)
        )

    @classmethod
    def empty(cls, cfg: SensorConfig, channel_set=DEFAULT_CHANNELS):
        h, w = cfg.height, cfg.width
        return cls(
            np.full((h, w, len(channel_set)), SENTINEL),
            np.full((h, w), IGNORE, np.int32),
            np.zeros((h, w), np.int32),
            np.zeros((h, w), bool),
            tuple(channel_set),
        )


def pixel_coords_array(xyz, cfg: SensorConfig):
    """Vectorised pixel mapping. Returns ``(u, v, inside, r)``; ``r == 0`` rows are not inside."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    pos = r > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        elev = np.arcsin(np.clip(np.where(pos, z / r, 0.0), -1.0, 1.0))
    u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width).astype(np.int64)
    v = np.floor((1.0 - (elev + cfg.fov_down) / cfg.fov) * cfg.height).astype(np.int64)
    inside = (
        pos
        & (elev >= -cfg.fov_down) & (elev <= cfg.fov_up)
        & (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height)
    )
    return u, v, inside, r


def pixel_coords(point, cfg: SensorConfig):
    """Map one point to integer ``(u, v)``, or ``None`` when it falls outside the image."""
    x, y, z = (float(c) for c in point[:3])
    r = np.sqrt(x * x + y * y + z * z)
    if not r > 0:
        raise NumericError("zero-range point has no direction")
    u, v, inside, _ = pixel_coords_array([[x, y, z]], cfg)
    if not inside[0]:
        return None
    return int(u[0]), int(v[0])


def project(cloud: LabeledPointCloud, cfg: SensorConfig, channel_set=DEFAULT_CHANNELS,
            label_map=None) -> RangeImage:
    """Project a cloud; colliding points resolve to the nearest, then the lowest index.

    ``label_map`` optionally remaps raw semantic ids to training ids (array
    lookup; negative entries become the ignore class).
    """
    channel_set = tuple(channel_set)
    unknown = set(channel_set) - set(ALL_CHANNELS)
    if unknown:
        raise KeyError(f"unknown channels {sorted(unknown)}")
    img = RangeImage.empty(cfg, channel_set)
    n = len(cloud)
    img.meta["n_points"] = n
    img.meta["zero_range"] = 0
    img.meta["out_of_fov"] = 0
    if n == 0:
        img.meta["point_index"] = np.full(img.shape, -1, np.int64)
        return img

    pts = cloud.points.astype(np.float64)
    u, v, inside, r = pixel_coords_array(pts[:, :3], cfg)
    img.meta["zero_range"] = int((r == 0).sum())
    img.meta["out_of_fov"] = int((~inside).sum()) - img.meta["zero_range"]

    idx = np.flatnonzero(inside)
    order = idx[np.lexsort((idx, r[idx]))]
    flat = v[order] * cfg.width + u[order]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    vv, uu = v[win], u[win]

    cols = {
        "x": pts[win, 0], "y": pts[win, 1], "z": pts[win, 2],
        "r": r[win], "remission": pts[win, 3],
    }
    for k, name in enumerate(channel_set):
        img.channels[vv, uu, k] = cols[name]
    img.valid[vv, uu] = True
    if cloud.sem_label is not None:
        sem = cloud.sem_label[win].astype(np.int64)
        if label_map is not None:
            lut = np.asarray(label_map, dtype=np.int64)
            sem = np.where(sem < len(lut), lut[np.minimum(sem, len(lut) - 1)], IGNORE)
            sem[sem < 0] = IGNORE
        img.labels[vv, uu] = sem
    if cloud.inst_label is not None:
        img.instances[vv, uu] = cloud.inst_label[win]
    point_index = np.full(img.shape, -1, np.int64)
    point_index[vv, uu] = win
    img.meta["point_index"] = point_index
    return img


def unproject(img: RangeImage, cfg: SensorConfig) -> LabeledPointCloud:
    """One point per valid pixel; ``z`` is rebuilt from ``r`` unless a z channel exists."""
    vv, uu = np.nonzero(img.valid)
    x = img.channel("x")[vv, uu]
    y = img.channel("y")[vv, uu]
    if "z" in img.channel_set:
        z = img.channel("z")[vv, uu]
    else:
        r = img.channel("r")[vv, uu]
        z2 = r * r - x * x - y * y
        bad = z2 < -1e-6 * np.maximum(r * r, 1.0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(
                f"pixel (u={uu[i]}, v={vv[i]}): r^2 < x^2 + y^2 ({r[i]**2:.6g} < {x[i]**2 + y[i]**2:.6g})"
            )
        sign = np.where(cfg.row_elevation(vv) >= 0, 1.0, -1.0)
        z = sign * np.sqrt(np.maximum(z2, 0.0))
    rem = img.channel("remission")[vv, uu] if "remission" in img.channel_set else np.zeros(len(vv))
    sem = np.where(img.labels[vv, uu] >= 0, img.labels[vv, uu], 0)
    return LabeledPointCloud(np.column_stack([x, y, z, rem]), sem, img.instances[vv, uu])


# --------------------------------------------------------------------------- #
# debug tensor dump
# --------------------------------------------------------------------------- #
def dump_tensor(img: RangeImage, path):
    """Header ``w, h, K`` (uint32 LE), then row-major float32 ``(h, w, K)``."""
    h, w, k = img.channels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", w, h, k))
        fh.write(np.ascontiguousarray(img.channels, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: missing 12-byte header", offset=len(data))
    w, h, k = struct.unpack("<3I", data[:12])
    if len(data) != 12 + 4 * w * h * k:
        raise FormatError(f"{path}: expected {12 + 4 * w * h * k} bytes, got {len(data)}", offset=12)
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, k).copy()


# --------------------------------------------------------------------------- #
# estimator wrapper
# --------------------------------------------------------------------------- #
class SphericalProjector(TransformerMixin, BaseEstimator):
    """Stateless transformer from point clouds to :class:`RangeImage` objects.

    Parameters
    ----------
    width, height : int
        Range image size in pixels.
    fov_up, fov_down : float
        Vertical field of view above and below the horizon, in degrees.
    channels : tuple of str
        Channel layout, a subset/ordering of ``("x", "y", "z", "r", "remission")``.
    label_map : array-like or None
        Raw semantic id to training id lookup.
    """

    def __init__(self, width=64, height=16, fov_up=3.0, fov_down=25.0,
                 channels=DEFAULT_CHANNELS, label_map=None):
        self.width = width
        self.height = height
        self.fov_up = fov_up
        self.fov_down = fov_down
        self.channels = channels
        self.label_map = label_map

    @property
    def sensor_config(self) -> SensorConfig:
        return SensorConfig.from_degrees(self.width, self.height, self.fov_up, self.fov_down)

    def fit(self, X=None, y=None):
        self.sensor_config_ = self.sensor_config
        self.n_channels_ = len(self.channels)
        return self

    def transform(self, X):
        cfg = self.sensor_config
        if isinstance(X, LabeledPointCloud):
            X = [X]
        return [project(c, cfg, self.channels, self.label_map) for c in X]

    def inverse_transform(self, X):
        cfg = self.sensor_config
        return [unproject(img, cfg) for img in X]


def stack_images(images):
    """Stack images into ``(X, y, valid)`` arrays of shape ``(n, H, W, K)``, ``(n, H, W)``, ``(n, H, W)``."""
    X = np.stack([im.channels for im in images])
    y = np.stack([im.labels for im in images])
    valid = np.stack([im.valid for im in images])
    return X, y, valid


def with_channels(img: RangeImage, channels) -> RangeImage:
    return replace(img, channels=channels)
