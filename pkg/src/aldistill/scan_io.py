"""Semantic-KITTI style scan/label I/O and a synthetic labeled scene generator.

Scans are stored as little-endian float32 quadruples ``(x, y, z, remission)``
and labels as little-endian uint32 words whose low 16 bits hold the semantic
class and high 16 bits the instance id. Real sequences therefore drop in
unchanged.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import FormatError

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_BYTES = 16

SYNTHETIC_CLASSES = ("ground", "building", "vehicle", "pole", "person", "vegetation")
THING_CLASSES = (2, 3, 4)


@dataclass
class LabeledPointCloud:
    """N points with float32 ``(x, y, z, remission)`` rows and per-point labels.

    ``sem_label`` and ``inst_label`` are ``None`` until labels are attached.
    """

    points: np.ndarray
    sem_label: np.ndarray | None = None
    inst_label: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=SCAN_DTYPE).reshape(-1, 4)
        n = len(self.points)
        for name in ("sem_label", "inst_label"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.uint32).reshape(-1)
                if len(arr) != n:
                    raise ValueError(f"{name} has {len(arr)} entries, expected {n}")
                setattr(self, name, arr)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def remission(self):
        return self.points[:, 3]

    @property
    def has_labels(self):
        return self.sem_label is not None

    def label_words(self):
        sem = self.sem_label if self.sem_label is not None else np.zeros(len(self), np.uint32)
        inst = self.inst_label if self.inst_label is not None else np.zeros(len(self), np.uint32)
        return ((inst.astype(np.uint32) << 16) | (sem.astype(np.uint32) & 0xFFFF)).astype(LABEL_DTYPE)


# --------------------------------------------------------------------------- #
# binary formats
# --------------------------------------------------------------------------- #
def decode_scan(data: bytes) -> LabeledPointCloud:
    if len(data) % POINT_BYTES:
        offset = len(data) - len(data) % POINT_BYTES
        raise FormatError(
            f"truncated scan: {len(data)} bytes is not a multiple of {POINT_BYTES}; "
            f"incomplete point at byte offset {offset}",
            offset=offset,
        )
    points = np.frombuffer(data, dtype=SCAN_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise FormatError(f"non-finite value in point {idx}", offset=idx * POINT_BYTES)
    return LabeledPointCloud(points.copy())


def load_scan(path) -> LabeledPointCloud:
    """Read a ``.bin`` scan. Labels are left unset."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_scan(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}", offset=exc.offset) from None


def decode_labels(data: bytes, cloud: LabeledPointCloud) -> LabeledPointCloud:
    n = len(cloud)
    if len(data) != 4 * n:
        actual = len(data) / 4
        actual = int(actual) if actual.is_integer() else actual
        raise FormatError(
            f"label length mismatch: expected N={n} ({4 * n} bytes), "
            f"got N={actual} ({len(data)} bytes)",
            offset=min(len(data), 4 * n),
        )
    words = np.frombuffer(data, dtype=LABEL_DTYPE)
    return LabeledPointCloud(cloud.points, words & 0xFFFF, words >> 16)


def load_labels(path, cloud: LabeledPointCloud) -> LabeledPointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_labels(data, cloud)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}", offset=exc.offset) from None


def encode_scan(cloud: LabeledPointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype=SCAN_DTYPE).tobytes()


def encode_labels(cloud: LabeledPointCloud) -> bytes:
    return cloud.label_words().tobytes()


def write_scan(path, cloud: LabeledPointCloud):
    Path(path).write_bytes(encode_scan(cloud))


def write_labels(path, cloud: LabeledPointCloud):
    Path(path).write_bytes(encode_labels(cloud))


def content_hash(scan_bytes: bytes, label_bytes: bytes = b"") -> int:
    """Stable 64-bit hash of the concatenated scan and label bytes."""
    digest = hashlib.blake2b(scan_bytes + label_bytes, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def file_content_hash(scan_path, label_path=None) -> int:
    scan_bytes = Path(scan_path).read_bytes()
    label_bytes = Path(label_path).read_bytes() if label_path else b""
    return content_hash(scan_bytes, label_bytes)


# --------------------------------------------------------------------------- #
# manifest
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    scan_uri: str
    label_uri: str
    content_hash: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_count: int
    class_names: tuple[str, ...] = ()
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise FormatError("manifest sample ids must be dense and ordered 0..N-1")
        if self.class_names and len(self.class_names) != self.class_count:
            raise FormatError(
                f"{len(self.class_names)} class names for class_count={self.class_count}"
            )

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> ManifestEntry:
        return self.entries[i]

    @property
    def hashes(self) -> np.ndarray:
        return np.array([e.content_hash for e in self.entries], dtype=np.uint64)

    def scan_path(self, i) -> Path:
        return self.root / self.entries[i].scan_uri

    def label_path(self, i) -> Path:
        return self.root / self.entries[i].label_uri

    def load(self, i) -> LabeledPointCloud:
        cloud = load_scan(self.scan_path(i))
        return load_labels(self.label_path(i), cloud)

    def write(self, path):
        path = Path(path)
        lines = [f"# class_count={self.class_count}"]
        if self.class_names:
            lines.append("# class_names=" + ",".join(self.class_names))
        for e in self.entries:
            lines.append(f"{e.sample_id}\t{e.scan_uri}\t{e.label_uri}\t{e.content_hash:016x}")
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        class_count, class_names, entries = None, (), []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "class_count":
                    class_count = int(value)
                elif key == "class_names":
                    class_names = tuple(value.split(","))
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                entries.append(ManifestEntry(int(parts[0]), parts[1], parts[2], int(parts[3], 16)))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
        if class_count is None:
            class_count = len(class_names) if class_names else 0
        return cls(entries, class_count, class_names, root=path.parent)


def build_manifest(pairs: Sequence[tuple[str, str]], root, class_count, class_names=()):
    """Manifest over existing ``(scan, label)`` files, paths relative to ``root``."""
    root = Path(root)
    entries = [
        ManifestEntry(i, str(scan), str(label), file_content_hash(root / scan, root / label))
        for i, (scan, label) in enumerate(pairs)
    ]
    return DatasetManifest(entries, class_count, tuple(class_names), root=root)


# --------------------------------------------------------------------------- #
# synthetic scenes
# --------------------------------------------------------------------------- #
@dataclass
class SyntheticSpec:
    """Parameters of a procedurally generated labeled dataset.

    ``redundancy_rho`` of the scans are jittered near-duplicates of base scans;
    each of the first ``n_dup_bases`` bases (all bases when ``None``) is
    stored ``duplication_k`` times byte-identically.
    """

    n_scans: int = 10
    redundancy_rho: float = 0.0
    duplication_k: int = 1
    n_dup_bases: int | None = None
    jitter_sigma: float = 0.1
    extent: float = 40.0
    n_beams: int = 16
    n_azimuth: int = 256
    fov_up: float = np.radians(3.0)
    fov_down: float = np.radians(25.0)
    sensor_height: float = 1.73
    max_range: float = 60.0
    seed: int = 0

    def validate(self):
        if self.n_scans < 1:
            raise ValueError("n_scans must be >= 1")
        if not 0.0 <= self.redundancy_rho <= 1.0:
            raise ValueError("redundancy_rho must lie in [0, 1]")
        if self.duplication_k < 1:
            raise ValueError("duplication_k must be >= 1")
        if self.n_scans < self.duplication_k:
            raise ValueError(
                f"n_scans={self.n_scans} is smaller than duplication_k={self.duplication_k}"
            )
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        n_jit = int(np.floor(self.redundancy_rho * self.n_scans))
        if n_jit == self.n_scans and n_jit > 0:
            raise ValueError("redundancy_rho=1 leaves no base scan to copy")
        if self.n_dup_bases is not None:
            n_fixed = self.n_scans - n_jit
            if self.n_dup_bases < 0 or self.n_dup_bases * self.duplication_k > n_fixed:
                raise ValueError("n_dup_bases * duplication_k exceeds the non-jittered scan count")

    def layout(self):
        """Return ``(n_bases, copies_per_base, n_jittered)``."""
        n_jit = int(np.floor(self.redundancy_rho * self.n_scans))
        n_fixed = self.n_scans - n_jit
        k = self.duplication_k
        if self.n_dup_bases is None:
            n_bases = -(-n_fixed // k)
            copies = [k] * n_bases
            copies[-1] = n_fixed - k * (n_bases - 1)
        else:
            d = self.n_dup_bases
            n_bases = n_fixed - d * (k - 1)
            copies = [k] * d + [1] * (n_bases - d)
        return n_bases, copies, n_jit


def _beam_elevations(spec: SyntheticSpec):
    # beam centres sit in the middle of image rows of an n_beams-high image
    f = spec.fov_up + spec.fov_down
    return spec.fov_up - (np.arange(spec.n_beams) + 0.5) * f / spec.n_beams


def _ray_directions(spec: SyntheticSpec):
    elev = _beam_elevations(spec)
    az = (np.arange(spec.n_azimuth) + 0.5) * 2 * np.pi / spec.n_azimuth - np.pi
    el, a = np.meshgrid(elev, az, indexing="ij")
    d = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1)
    return d.reshape(-1, 3)


def _hit_box(d, center, half, yaw):
    c, s = np.cos(-yaw), np.sin(-yaw)
    o = -np.asarray(center, float)
    o = np.array([c * o[0] - s * o[1], s * o[0] + c * o[1], o[2]])
    dl = np.stack([c * d[:, 0] - s * d[:, 1], s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-np.asarray(half) - o) * inv
        t2 = (np.asarray(half) - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_ellipsoid(d, center, radii):
    o = -np.asarray(center, float) / radii
    dl = d / radii
    a = (dl * dl).sum(1)
    b = 2 * dl @ o
    c = o @ o - 1.0
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _hit_cylinder(d, center, radius, z0, z1):
    ox, oy = -center[0], -center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (d[:, 0] * ox + d[:, 1] * oy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = t * d[:, 2]
    ok = (disc >= 0) & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(ok, t, np.inf)


_REMISSION = np.array([0.25, 0.45, 0.7, 0.55, 0.35, 0.15])


def _place(rng, extent, min_dist=4.0):
    while True:
        p = rng.uniform(-extent / 2, extent / 2, size=2)
        if np.hypot(*p) > min_dist:
            return p


def synthetic_scene(spec: SyntheticSpec, rng: np.random.Generator) -> LabeledPointCloud:
    """Ray-cast one spinning-LiDAR sweep over a random primitive scene."""
    d = _ray_directions(spec)
    g = -spec.sensor_height
    n = len(d)
    best = np.full(n, np.inf)
    sem = np.zeros(n, np.uint32)
    inst = np.zeros(n, np.uint32)

    def add(t, cls, inst_id=0):
        closer = t < best
        best[closer] = t[closer]
        sem[closer] = cls
        inst[closer] = inst_id

    with np.errstate(divide="ignore"):
        t_ground = np.where(d[:, 2] < 0, g / d[:, 2], np.inf)
    add(t_ground, 0)

    next_inst = 1
    for _ in range(rng.integers(2, 5)):
        c = _place(rng, spec.extent, 10.0)
        half = np.array([rng.uniform(3, 8), rng.uniform(3, 8), rng.uniform(3, 7)])
        add(_hit_box(d, [c[0], c[1], g + half[2]], half, rng.uniform(0, np.pi)), 1)
    for _ in range(rng.integers(2, 6)):
        c = _place(rng, spec.extent * 0.6)
        half = np.array([2.25, 0.9, 0.75]) * rng.uniform(0.85, 1.15)
        add(_hit_box(d, [c[0], c[1], g + half[2]], half, rng.uniform(0, np.pi)), 2, next_inst)
        next_inst += 1
    for _ in range(rng.integers(2, 7)):
        c = _place(rng, spec.extent * 0.6)
        add(_hit_cylinder(d, c, rng.uniform(0.12, 0.25), g, g + rng.uniform(3, 6)), 3, next_inst)
        next_inst += 1
    for _ in range(rng.integers(1, 5)):
        c = _place(rng, spec.extent * 0.5)
        radii = np.array([0.3, 0.3, 0.9]) * rng.uniform(0.9, 1.1)
        add(_hit_ellipsoid(d, [c[0], c[1], g + radii[2]], radii), 4, next_inst)
        next_inst += 1
    for _ in range(rng.integers(2, 6)):
        c = _place(rng, spec.extent)
        radii = rng.uniform(1.0, 3.0, size=3)
        add(_hit_ellipsoid(d, [c[0], c[1], g + rng.uniform(1.0, 3.5)], radii), 5)

    hit = best <= spec.max_range
    r = best[hit] + rng.normal(0, 0.01, size=hit.sum())
    xyz = d[hit] * r[:, None]
    rem = np.clip(_REMISSION[sem[hit]] + rng.normal(0, 0.05, size=hit.sum()), 0.0, 1.0)
    pts = np.column_stack([xyz, rem])
    return LabeledPointCloud(pts, sem[hit], inst[hit])


def jitter_cloud(cloud: LabeledPointCloud, sigma: float, rng) -> LabeledPointCloud:
    """Near-duplicate: rigid translation ~ N(0, sigma) plus per-point N(0, sigma) jitter."""
    shift = rng.normal(0, sigma, size=3)
    noise = rng.normal(0, sigma, size=(len(cloud), 3))
    pts = cloud.points.astype(np.float64)
    pts[:, :3] += shift + noise
    return LabeledPointCloud(pts, cloud.sem_label.copy(), cloud.inst_label.copy())


def gen_synthetic_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write ``spec.n_scans`` labeled scans plus ``manifest.tsv`` under ``out_dir``.

    Entries are grouped: each base is followed by its exact replicas, and the
    jittered near-duplicates come last. Output is byte-identical for a fixed seed.
    """
    spec.validate()
    out_dir = Path(out_dir)
    scan_dir = out_dir / "velodyne"
    label_dir = out_dir / "labels"
    try:
        scan_dir.mkdir(parents=True, exist_ok=True)
        label_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")

    n_bases, copies, n_jit = spec.layout()
    root = np.random.SeedSequence(spec.seed)
    base_seqs = root.spawn(n_bases + 1)
    jit_rng = np.random.default_rng(base_seqs[-1])

    bases, clouds = [], []
    for b in range(n_bases):
        cloud = synthetic_scene(spec, np.random.default_rng(base_seqs[b]))
        bases.append(cloud)
        clouds.extend([cloud] * copies[b])
    for _ in range(n_jit):
        src = bases[int(jit_rng.integers(n_bases))]
        clouds.append(jitter_cloud(src, spec.jitter_sigma, jit_rng))

    entries = []
    for i, cloud in enumerate(clouds):
        scan_uri = f"velodyne/{i:06d}.bin"
        label_uri = f"labels/{i:06d}.label"
        sb, lb = encode_scan(cloud), encode_labels(cloud)
        (out_dir / scan_uri).write_bytes(sb)
        (out_dir / label_uri).write_bytes(lb)
        entries.append(ManifestEntry(i, scan_uri, label_uri, content_hash(sb, lb)))

    manifest = DatasetManifest(entries, len(SYNTHETIC_CLASSES), SYNTHETIC_CLASSES, root=out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest

