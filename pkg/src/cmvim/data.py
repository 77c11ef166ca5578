"""Synthetic paired volumes, the ``.cmv`` volume container, splits and dataset folders.

The generator stands in for paired T1/PET scans. Each sample has

* a smooth latent field shared by both modalities (cross-modal structure),
* class-specific Gaussian blobs inside one of three fixed regions, with an
  amplitude that grows from NC to AD (within-modality class structure),
* independent Gaussian noise per modality,

and each volume is min-max normalised to ``[0, 1]``.
"""
from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import ConfigError, _coerce

CLASSES = ("NC", "MCI", "AD")
MODALITY_CODES = {"mri": 0, "pet": 1}
VOLUME_MAGIC = b"CMVIMVOL"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<8sI3IBB")


class VolumeFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_samples: int = 60
    volume_size: int = 32
    class_priors: tuple = (1 / 3, 1 / 3, 1 / 3)
    blob_count: int = 2
    blob_radius: float = 3.0
    blob_amplitude: tuple = (0.4, 1.0, 1.6)   # per class, graded NC < MCI < AD
    pet_blob_gain: float = 1.5
    region_jitter: float = 2.0
    latent_smoothing: float = 3.0
    latent_gain: float = 1.0
    pet_latent_gain: float = 0.8
    noise_mri: float = 0.15
    noise_pet: float = 0.2
    balanced: bool = True
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_samples < 1 or self.volume_size < 4:
            raise ConfigError("n_samples must be >= 1 and volume_size >= 4")
        if len(self.class_priors) != 3 or abs(sum(self.class_priors) - 1) > 1e-6 or min(self.class_priors) < 0:
            raise ConfigError("class_priors must be three non-negative numbers summing to 1")
        if len(self.blob_amplitude) != 3:
            raise ConfigError("blob_amplitude needs one value per class")
        if self.noise_mri < 0 or self.noise_pet < 0:
            raise ConfigError("noise levels must be >= 0")
        return self

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        spec = cls()
        names = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ConfigError(f"unknown spec key: {key}")
            if names[key].type == "tuple":
                value = tuple(float(v) for v in raw.replace(",", " ").split())
            else:
                value = _coerce(key, raw, names[key].type)
            setattr(spec, key, value)
        return spec.validate()

    def region_centers(self) -> np.ndarray:
        """One blob region per class, well separated inside the volume."""
        v = self.volume_size
        frac = np.array([[0.3, 0.3, 0.3], [0.3, 0.7, 0.7], [0.7, 0.5, 0.3]])
        return frac * (v - 1)


@dataclass
class VolumePair:
    mri: np.ndarray
    pet: np.ndarray
    label: int
    sample_id: str = ""


@dataclass
class Dataset:
    mri: np.ndarray              # [n, Z, Y, X] float32
    pet: np.ndarray
    labels: np.ndarray           # [n] int64
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.mri[idx], self.pet[idx], self.labels[idx], [self.ids[i] for i in idx])

    def pairs(self):
        for i in range(len(self)):
            yield VolumePair(self.mri[i], self.pet[i], int(self.labels[i]), self.ids[i])


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-12:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _blob_field(shape, centers, radius: float) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    out = np.zeros(shape)
    for c in centers:
        d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        out += np.exp(-d2 / (2 * radius ** 2))
    return out


def _base_anatomy(v: int) -> np.ndarray:
    """Ellipsoidal 'head' with a soft rim, identical for every sample."""
    g = (np.arange(v) - (v - 1) / 2) / (v / 2)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    r = np.sqrt((zz / 0.9) ** 2 + (yy / 0.8) ** 2 + (xx / 0.85) ** 2)
    return 0.5 / (1 + np.exp((r - 0.85) * 20))


def generate_sample(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    v = spec.volume_size
    shape = (v, v, v)
    latent = gaussian_filter(rng.normal(size=shape), spec.latent_smoothing, mode="wrap")
    latent /= latent.std() + 1e-12
    center = spec.region_centers()[label]
    centers = center + rng.uniform(-spec.region_jitter, spec.region_jitter, size=(spec.blob_count, 3))
    blobs = spec.blob_amplitude[label] * _blob_field(shape, centers, spec.blob_radius)
    base = _base_anatomy(v)
    mri = base + spec.latent_gain * 0.25 * latent + blobs + spec.noise_mri * rng.normal(size=shape)
    pet = base + spec.pet_latent_gain * 0.25 * latent + spec.pet_blob_gain * blobs \
        + spec.noise_pet * rng.normal(size=shape)
    return _minmax(mri).astype(np.float32), _minmax(pet).astype(np.float32)


def class_labels(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.balanced:
        labels = np.arange(spec.n_samples) % 3
        return rng.permutation(labels)
    return rng.choice(3, size=spec.n_samples, p=np.asarray(spec.class_priors, dtype=float))


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset; sample ``i`` uses its own child seed."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    label_seq, sample_seq = root.spawn(2)
    labels = class_labels(spec, np.random.default_rng(label_seq))
    children = sample_seq.spawn(spec.n_samples)
    v = spec.volume_size
    mri = np.empty((spec.n_samples, v, v, v), dtype=np.float32)
    pet = np.empty_like(mri)
    for i, (lab, ss) in enumerate(zip(labels, children)):
        mri[i], pet[i] = generate_sample(spec, int(lab), np.random.default_rng(ss))
    ids = [f"s{i:05d}" for i in range(spec.n_samples)]
    return Dataset(mri, pet, labels.astype(np.int64), ids)


def region_means(ds: Dataset, spec: SyntheticSpec, radius: float | None = None) -> np.ndarray:
    """Mean intensity of each modality inside each class region: ``[n, 6]`` features."""
    v = spec.volume_size
    r = radius if radius is not None else spec.blob_radius + spec.region_jitter
    zz, yy, xx = np.meshgrid(*(np.arange(v),) * 3, indexing="ij")
    feats = []
    for c in spec.region_centers():
        inside = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r ** 2
        feats.append(ds.mri[:, inside].mean(axis=1))
        feats.append(ds.pet[:, inside].mean(axis=1))
    return np.stack(feats, axis=1)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split(n: int, fractions=(0.70, 0.10, 0.20), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled ``(train, val, test)`` indices of sizes ``floor(f0 n)``, ``floor(f1 n)``, remainder."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# ---------------------------------------------------------------------------
# volume container
# ---------------------------------------------------------------------------

def write_volume(path, volume: np.ndarray, modality: str = "mri", label: int = 0) -> None:
    vol = np.ascontiguousarray(volume, dtype="<f4")
    if vol.ndim != 3:
        raise VolumeFormatError(f"volume must be 3-D, got shape {vol.shape}")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *vol.shape, MODALITY_CODES[modality], label)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.tobytes())


def read_volume(path) -> tuple[np.ndarray, str, int]:
    """Return ``(volume, modality, label)``; rejects bad headers before reading the payload."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise VolumeFormatError(f"{path}: truncated header ({len(head)} bytes)")
        magic, version, d, h, w, mod, label = _HEADER.unpack(head)
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        if version != VOLUME_VERSION:
            raise VolumeFormatError(f"{path}: unsupported version {version}")
        expected = _HEADER.size + 4 * d * h * w
        if size != expected:
            raise VolumeFormatError(f"{path}: length mismatch, header declares {expected} bytes, file has {size}")
        if mod not in MODALITY_CODES.values():
            raise VolumeFormatError(f"{path}: unknown modality code {mod}")
        payload = fh.read(4 * d * h * w)
    vol = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
    modality = {v: k for k, v in MODALITY_CODES.items()}[mod]
    return vol, modality, label


# ---------------------------------------------------------------------------
# dataset folders: <root>/<split>/<id>_{mri|pet}.cmv + labels.tsv
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def write_dataset(root, ds: Dataset, splits: dict[str, np.ndarray]) -> None:
    root = Path(root)
    for name, idx in splits.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in idx:
            sid = ds.ids[i]
            lab = int(ds.labels[i])
            write_volume(d / f"{sid}_mri.cmv", ds.mri[i], "mri", lab)
            write_volume(d / f"{sid}_pet.cmv", ds.pet[i], "pet", lab)
            rows.append(f"{sid}\t{lab}\n")
        (d / "labels.tsv").write_text("".join(rows), encoding="utf-8")


def read_split(root, name: str) -> Dataset:
    d = Path(root) / name
    table = d / "labels.tsv"
    if not table.exists():
        raise FileNotFoundError(f"missing {table}")
    ids, labels, mri, pet = [], [], [], []
    for line in table.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, lab = line.split("\t")
        ids.append(sid)
        labels.append(int(lab))
        mri.append(read_volume(d / f"{sid}_mri.cmv")[0])
        pet.append(read_volume(d / f"{sid}_pet.cmv")[0])
    if not ids:
        raise FileNotFoundError(f"{table} lists no samples")
    return Dataset(np.stack(mri), np.stack(pet), np.asarray(labels, dtype=np.int64), ids)


def read_dataset(root) -> dict[str, Dataset]:
    return {name: read_split(root, name) for name in SPLITS if (Path(root) / name / "labels.tsv").exists()}
