"""Synthetic slide generation, bag-file serialization, manifests, configs.

Bag binary format (little-endian): 8-byte magic "JIGMIL01", uint32 N,
uint32 d1, then N records of (2 + d1) float32: cx, cy, f0..f(d1-1). Values
are stored as 32-bit on disk and widened to 64-bit in memory; the synthetic
generator quantizes through float32 so in-memory bags equal their on-disk
round trip bit for bit.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_from_dict  # noqa: F401  (re-exported loader below)
from .errors import ConfigError, DataError, FormatError

BAG_MAGIC = b"JIGMIL01"

SYNTH_TASKS = ("spatial", "presence")


@dataclass
class PatchBag:
    """One slide: patch feature vectors, their centroids, and the label."""

    slide_id: str
    patient_id: str
    label: int
    centroids: np.ndarray  # (N, 2)
    features: np.ndarray  # (N, d1)

    @property
    def n_patches(self):
        return self.centroids.shape[0]


@dataclass
class ManifestEntry:
    slide_id: str
    patient_id: str
    label: int
    path: str


@dataclass
class Manifest:
    d1: int
    slides: list


@dataclass
class SynthSpec:
    """Desk-scale synthetic cohort with a planted spatial or presence signal."""

    task: str = "spatial"
    n_slides: int = 120
    patches_per_slide: int = 150
    d1: int = 16
    signal_fraction: float = 0.2
    cluster_radius: float = 0.15
    feature_shift: float = 1.0
    position_drift: float = 0.5
    seed: int = 0


def _validate_synth_spec(spec):
    if spec.task not in SYNTH_TASKS:
        raise ConfigError(f"task must be one of {SYNTH_TASKS}, got {spec.task!r}")
    if spec.n_slides < 2 or spec.patches_per_slide < 1 or spec.d1 < 1:
        raise ConfigError("n_slides >= 2, patches_per_slide >= 1, d1 >= 1 required")
    if not 0.0 < spec.signal_fraction < 1.0:
        raise ConfigError(
            f"signal_fraction must be in (0,1), got {spec.signal_fraction}"
        )
    if spec.task == "spatial" and not 0.0 < spec.cluster_radius < 0.5:
        raise ConfigError(
            f"cluster_radius must be in (0, 0.5) for the spatial task, "
            f"got {spec.cluster_radius}"
        )
    if spec.position_drift < 0:
        raise ConfigError(f"position_drift must be >= 0, got {spec.position_drift}")
    if spec.position_drift > 0 and spec.d1 < 3:
        raise ConfigError("position_drift needs d1 >= 3 (drift uses coords 2 and 3)")


def _f32_roundtrip(arr):
    return arr.astype(np.float32).astype(np.float64)


def generate_synthetic_dataset(spec):
    """Deterministic synthetic cohort; returns (Manifest, list of PatchBag).

    Signal patches shift feature coordinate 1 by ``feature_shift``; every
    patch leaks ``position_drift * (cx, cy)`` into feature coordinates 2 and
    3. Task ``spatial`` plants the label in the *arrangement* only: signal
    counts match across classes, but positive slides have their signal
    centroids resampled inside a random disc. Task ``presence`` gives signal
    patches to positive slides only.
    """
    _validate_synth_spec(spec)
    n_sig = int(round(spec.signal_fraction * spec.patches_per_slide))
    if spec.task == "spatial" and n_sig < 1:
        raise ConfigError("signal_fraction too small: no signal patches per slide")

    entries = []
    bags = []
    for i in range(spec.n_slides):
        rng = np.random.default_rng([spec.seed, 7, i])
        label = i % 2
        n = spec.patches_per_slide
        centroids = rng.random((n, 2))
        k_sig = n_sig if (spec.task == "spatial" or label == 1) else 0

        if spec.task == "spatial" and label == 1 and k_sig:
            r = spec.cluster_radius
            center = rng.uniform(r, 1.0 - r, size=2)
            radii = r * np.sqrt(rng.random(k_sig))
            angles = rng.uniform(0.0, 2.0 * np.pi, size=k_sig)
            centroids[:k_sig, 0] = center[0] + radii * np.cos(angles)
            centroids[:k_sig, 1] = center[1] + radii * np.sin(angles)

        features = rng.standard_normal((n, spec.d1))
        if k_sig:
            features[:k_sig, 0] += spec.feature_shift
        if spec.position_drift > 0:
            features[:, 1] += spec.position_drift * centroids[:, 0]
            features[:, 2] += spec.position_drift * centroids[:, 1]

        perm = rng.permutation(n)
        slide_id = f"slide{i:04d}"
        bags.append(
            PatchBag(
                slide_id=slide_id,
                patient_id=f"patient{i:04d}",
                label=label,
                centroids=_f32_roundtrip(centroids[perm]),
                features=_f32_roundtrip(features[perm]),
            )
        )
        entries.append(
            ManifestEntry(
                slide_id=slide_id,
                patient_id=f"patient{i:04d}",
                label=label,
                path=f"{slide_id}.bag",
            )
        )
    return Manifest(d1=spec.d1, slides=entries), bags


def write_bag(path, centroids, features):
    """Write one bag file; payload is float32 on disk."""
    centroids = np.asarray(centroids, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n, d1 = features.shape
    if n < 1:
        raise DataError("a bag needs at least one patch")
    if centroids.shape != (n, 2):
        raise DataError(
            f"centroids shape {centroids.shape} does not match {n} patches"
        )
    if not (np.isfinite(centroids).all() and np.isfinite(features).all()):
        raise DataError("bag payload must be finite")
    records = np.empty((n, 2 + d1), dtype="<f4")
    records[:, :2] = centroids
    records[:, 2:] = features
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(struct.pack("<II", n, d1))
        fh.write(records.tobytes())


def read_bag(path):
    """Read one bag file; returns (centroids, features) widened to float64."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != BAG_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    if len(blob) < 16:
        raise FormatError(f"truncated header in {path}", offset=len(blob))
    n, d1 = struct.unpack("<II", blob[8:16])
    if n == 0:
        raise DataError(f"bag {path} declares zero patches")
    if d1 == 0:
        raise FormatError(f"bag {path} declares zero feature dims", offset=12)
    expected = 16 + n * (2 + d1) * 4
    if len(blob) != expected:
        raise FormatError(
            f"bag {path} has {len(blob)} bytes, expected {expected}",
            offset=min(len(blob), expected),
        )
    records = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, 2 + d1)
    records = records.astype(np.float64)
    return records[:, :2].copy(), records[:, 2:].copy()


def read_bag_csv(path):
    """CSV import: header patch_id,cx,cy,f0..f{d-1}; one row per patch."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["patch_id", "cx", "cy"]:
            raise FormatError(f"unexpected CSV header in {path}", offset=0)
        d1 = len(header) - 3
        if d1 < 1:
            raise FormatError(f"no feature columns in {path}", offset=0)
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise FormatError(f"{path} line {line_no}: wrong column count")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path} line {line_no}: {exc}") from exc
    if not rows:
        raise DataError(f"bag {path} has no patches")
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, :2].copy(), arr[:, 2:].copy()


def write_manifest(manifest, path):
    obj = {
        "d1": manifest.d1,
        "slides": [
            {
                "slide_id": e.slide_id,
                "patient_id": e.patient_id,
                "label": e.label,
                "path": e.path,
            }
            for e in manifest.slides
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"d1", "slides"}:
        raise ConfigError("manifest must be an object with keys 'd1' and 'slides'")
    d1 = obj["d1"]
    if not isinstance(d1, int) or d1 < 1:
        raise ConfigError(f"manifest d1 must be a positive integer, got {d1!r}")
    entries = []
    seen = set()
    for rec in obj["slides"]:
        if not isinstance(rec, dict) or set(rec) != {
            "slide_id", "patient_id", "label", "path",
        }:
            raise ConfigError(
                "each slide record needs exactly slide_id, patient_id, label, path"
            )
        if rec["label"] not in (0, 1):
            raise ConfigError(
                f"label must be 0 or 1, got {rec['label']!r} "
                f"for slide {rec['slide_id']!r}"
            )
        if rec["slide_id"] in seen:
            raise ConfigError(f"duplicate slide_id {rec['slide_id']!r}")
        seen.add(rec["slide_id"])
        entries.append(ManifestEntry(**rec))
    return Manifest(d1=d1, slides=entries)


def write_dataset(manifest, bags, out_dir):
    """Write every bag plus manifest.json into out_dir; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {b.slide_id: b for b in bags}
    for entry in manifest.slides:
        bag = by_id[entry.slide_id]
        write_bag(out_dir / entry.path, bag.centroids, bag.features)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest, manifest_path)
    return manifest_path


def load_dataset(manifest_path):
    """Read a manifest and all its bag files; returns (Manifest, bags)."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    bags = []
    for entry in manifest.slides:
        p = Path(entry.path)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataError(f"bag file {p} for slide {entry.slide_id!r} not found")
        if p.suffix == ".csv":
            centroids, features = read_bag_csv(p)
        else:
            centroids, features = read_bag(p)
        if features.shape[1] != manifest.d1:
            raise FormatError(
                f"bag {p} has d1={features.shape[1]}, manifest says {manifest.d1}"
            )
        bags.append(
            PatchBag(
                slide_id=entry.slide_id,
                patient_id=entry.patient_id,
                label=entry.label,
                centroids=centroids,
                features=features,
            )
        )
    return manifest, bags


def load_config(path):
    """Parse a TrainConfig JSON object, filling defaults."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj)
