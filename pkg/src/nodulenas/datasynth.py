"""Deterministic synthetic 3D nodule volumes, file IO, manifests, and folds.

Benign samples are single smooth axis-aligned ellipsoids; malignant samples
are unions of several offset lobes with an off-center dense core, giving the
lobulated border / eccentric growth morphology a classifier (and its spatial
attention) can latch onto.

Volume file format ("NLV1", little-endian):
    magic "NLV1" | u32 depth | u32 height | u32 width | u8 label
    | depth*height*width float32 voxels, row-major
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

VOLUME_EXTENT = 32
MAGIC = b"NLV1"
MANIFEST_VERSION = "nodulenas-manifest-1"


class DataError(ValueError):
    pass


class VolumeFormatError(DataError):
    """Bad magic, truncated payload, or extent mismatch in a volume file."""


@dataclass(frozen=True)
class GeneratorParams:
    radius_min: float = 5.0
    radius_max: float = 9.0
    lobe_count_min: int = 3
    lobe_count_max: int = 6
    lobe_radius_scale: float = 0.55
    lobe_offset_scale: float = 0.8
    core_radius: float = 2.0
    core_offset: float = 3.0
    core_boost: float = 0.35
    amplitude: float = 0.75
    noise_amplitude: float = 0.04
    sharpness: float = 2.0

    def __post_init__(self):
        if self.radius_min <= 0 or self.radius_max < self.radius_min:
            raise DataError("degenerate radius range")
        if self.core_radius <= 0:
            raise DataError("degenerate core radius")
        if not 1 <= self.lobe_count_min <= self.lobe_count_max:
            raise DataError("degenerate lobe count range")


@dataclass
class VolumeSample:
    voxels: np.ndarray  # (32, 32, 32) floats in [0, 1]
    label: int
    id: str
    seed: int = 0

    def validate(self):
        if self.voxels.shape != (VOLUME_EXTENT,) * 3:
            raise DataError(f"volume must be {VOLUME_EXTENT}^3, got {self.voxels.shape}")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")
        if self.voxels.min() < 0 or self.voxels.max() > 1:
            raise DataError("voxel values must lie in [0, 1]")
        return self


def _coords():
    c = np.arange(VOLUME_EXTENT) - (VOLUME_EXTENT - 1) / 2.0
    return np.meshgrid(c, c, c, indexing="ij")


def _ellipsoid(center, radii, sharpness):
    zz, yy, xx = _coords()
    r2 = (((zz - center[0]) / radii[0]) ** 2
          + ((yy - center[1]) / radii[1]) ** 2
          + ((xx - center[2]) / radii[2]) ** 2)
    return np.exp(-(r2 ** (sharpness / 2.0)))


def generate_nodule(seed: int, cls: str, params: GeneratorParams = GeneratorParams()) -> VolumeSample:
    """Deterministic volume for (seed, class, params); values clipped to [0, 1]."""
    if cls not in ("benign", "malignant"):
        raise DataError(f"unknown class {cls!r}")
    label = 0 if cls == "benign" else 1
    rng = np.random.default_rng([seed, label, 0x4E4C])
    vol = np.zeros((VOLUME_EXTENT,) * 3)
    if cls == "benign":
        radii = rng.uniform(params.radius_min, params.radius_max, 3)
        vol = params.amplitude * _ellipsoid((0.0, 0.0, 0.0), radii, params.sharpness)
    else:
        base = rng.uniform(params.radius_min, params.radius_max)
        n_lobes = int(rng.integers(params.lobe_count_min, params.lobe_count_max + 1))
        for _ in range(n_lobes):
            offset = rng.uniform(-1.0, 1.0, 3) * base * params.lobe_offset_scale
            radii = rng.uniform(0.6, 1.4, 3) * base * params.lobe_radius_scale
            lobe = params.amplitude * _ellipsoid(offset, radii, params.sharpness)
            vol = np.maximum(vol, lobe)
        direction = rng.uniform(-1.0, 1.0, 3)
        direction /= max(np.linalg.norm(direction), 1e-9)
        core_center = direction * params.core_offset
        core = (params.amplitude + params.core_boost) * _ellipsoid(
            core_center, (params.core_radius,) * 3, params.sharpness)
        vol = np.maximum(vol, core)
    if params.noise_amplitude > 0:
        vol = vol + rng.normal(0, params.noise_amplitude, vol.shape)
    vol = np.clip(vol, 0.0, 1.0)
    sample = VolumeSample(voxels=vol, label=label, id=f"{cls}-{seed:06d}", seed=seed)
    return sample.validate()


def write_volume(sample: VolumeSample, path):
    sample.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(sample.voxels.shape, dtype="<u4").tobytes())
        fh.write(np.array([sample.label], dtype="u1").tobytes())
        fh.write(sample.voxels.astype("<f4").tobytes())


def read_volume(path) -> VolumeSample:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise VolumeFormatError(f"bad magic in {path}: {blob[:4]!r}")
    if len(blob) < 17:
        raise VolumeFormatError(f"truncated header in {path}")
    extents = np.frombuffer(blob, dtype="<u4", count=3, offset=4)
    label = int(blob[16])
    n = int(np.prod(extents))
    if len(blob) != 17 + 4 * n:
        raise VolumeFormatError(f"truncated payload in {path}: {len(blob)} bytes, "
                                f"expected {17 + 4 * n}")
    if tuple(extents) != (VOLUME_EXTENT,) * 3:
        raise VolumeFormatError(f"unexpected extents {tuple(extents)} in {path}")
    voxels = np.frombuffer(blob, dtype="<f4", count=n, offset=17)
    voxels = voxels.reshape(tuple(extents)).astype(np.float64)
    return VolumeSample(voxels=voxels, label=label, id=path.stem, seed=0)


@dataclass
class DatasetManifest:
    version: str = MANIFEST_VERSION
    generator: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)  # dicts: id, path, label, seed
    folds: dict = field(default_factory=dict)    # id -> fold index

    def validate(self, base_dir=None):
        ids = [s["id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")
        if self.folds and set(self.folds) != set(ids):
            raise DataError("fold assignment does not partition the sample ids")
        if base_dir is not None:
            for s in self.samples:
                if not (Path(base_dir) / s["path"]).exists():
                    raise DataError(f"missing volume file {s['path']}")
        return self


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        raw = json.load(fh)
    if raw.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {raw.get('version')!r}")
    return DatasetManifest(version=raw["version"], generator=raw.get("generator", {}),
                           samples=raw.get("samples", []),
                           folds=raw.get("folds", {})).validate()


def make_folds(manifest: DatasetManifest, k: int = 10, seed: int = 0) -> DatasetManifest:
    """Stratified fold assignment; per-class fold sizes differ by at most one."""
    if k < 2:
        raise DataError("k must be >= 2")
    if len(manifest.samples) < k:
        raise DataError(f"need at least {k} samples for {k} folds")
    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    for label in (0, 1):
        ids = sorted(s["id"] for s in manifest.samples if s["label"] == label)
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            folds[ids[idx]] = pos % k
    manifest.folds = folds
    return manifest


def generate_dataset(out_dir, n: int, seed: int = 0, k: int = 10,
                     params: GeneratorParams = GeneratorParams()) -> DatasetManifest:
    """n samples (half per class) written under out_dir with a fold-split manifest."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(generator=asdict(params) | {"seed": seed, "n": n})
    for i in range(n):
        cls = "benign" if i % 2 == 0 else "malignant"
        sample = generate_nodule(seed * 1_000_003 + i, cls, params)
        rel = f"volumes/{sample.id}.nlv"
        write_volume(sample, out_dir / rel)
        manifest.samples.append({"id": sample.id, "path": rel,
                                 "label": sample.label, "seed": sample.seed})
    make_folds(manifest, k=k, seed=seed)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_dataset(data_dir) -> tuple[DatasetManifest, list[VolumeSample]]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / "manifest.json").validate(data_dir)
    samples = []
    for entry in manifest.samples:
        s = read_volume(data_dir / entry["path"])
        s.label = entry["label"]
        s.id = entry["id"]
        s.seed = entry["seed"]
        samples.append(s)
    return manifest, samples


def augment(voxels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad 2 per side, random 32^3 crop, independent 50% flips per axis."""
    padded = np.pad(voxels, 2)
    off = rng.integers(0, 5, size=3)
    out = padded[off[0]:off[0] + VOLUME_EXTENT,
                 off[1]:off[1] + VOLUME_EXTENT,
                 off[2]:off[2] + VOLUME_EXTENT]
    flips = tuple(axis for axis in range(3) if rng.random() < 0.5)
    if flips:
        out = np.flip(out, axis=flips)
    return np.ascontiguousarray(out)
