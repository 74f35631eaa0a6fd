"""Volume data model, .evol file format, normalization, phantoms, splits.

A volume is a 3D scalar grid stored row-major with index (x*Y + y)*Z + z.
PET values are in SUV units, CT in Hounsfield units, masks are binary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EVIDVOL1"
# MAP carries derived outputs (three-way codes, ignorance masses) that are
# mask-shaped but not binary
MODALITIES = ("PET", "CT", "MASK", "MAP")


class VolumeFormatError(ValueError):
    """Malformed .evol file or invalid volume contents."""


@dataclass
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    modality: str
    voxels: np.ndarray  # shape dims, float32 or float64

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.shape != tuple(self.dims):
            raise VolumeFormatError(
                f"voxel array shape {self.voxels.shape} != dims {self.dims}")
        if self.modality not in MODALITIES:
            raise VolumeFormatError(f"unknown modality {self.modality!r}")
        if self.modality == "MASK":
            vals = np.unique(self.voxels)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise VolumeFormatError("MASK volume must be binary 0/1")


@dataclass
class PatientCase:
    id: str
    pet: Volume
    ct: Volume
    mask: Volume

    def __post_init__(self):
        if not (self.pet.dims == self.ct.dims == self.mask.dims):
            raise VolumeFormatError(
                f"case {self.id}: PET/CT/mask dims differ "
                f"({self.pet.dims}, {self.ct.dims}, {self.mask.dims})")


@dataclass
class NormalizationSpec:
    shift: float
    scale: float

    def __post_init__(self):
        if self.scale == 0:
            raise ValueError("scale must be nonzero")


PET_NORM = NormalizationSpec(shift=0.0, scale=0.1)
CT_NORM = NormalizationSpec(shift=1000.0, scale=1.0 / 2000.0)


def normalize(v: Volume, spec: NormalizationSpec) -> Volume:
    """Map each voxel w to (w + shift) * scale."""
    if v.modality == "MASK":
        raise ValueError("normalize does not apply to MASK volumes")
    return Volume(v.dims, v.spacing, v.modality,
                  (v.voxels + spec.shift) * spec.scale)


# -- .evol serialization ---------------------------------------------------

def write_volume(v: Volume, path):
    header = json.dumps({
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "modality": v.modality,
        "dtype": "f32",
    }).encode("utf-8")
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise VolumeFormatError(f"{path}: truncated header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    dims = tuple(header["dims"])
    count = dims[0] * dims[1] * dims[2]
    payload = raw[12 + hlen:]
    if len(payload) != 4 * count:
        raise VolumeFormatError(
            f"{path}: payload length mismatch "
            f"(expected {4 * count} bytes, got {len(payload)})")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Volume(dims, tuple(header["spacing"]), header["modality"], voxels)


def write_case(case: PatientCase, case_dir):
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_volume(case.pet, case_dir / "pet.evol")
    write_volume(case.ct, case_dir / "ct.evol")
    write_volume(case.mask, case_dir / "mask.evol")
    (case_dir / "case.json").write_text(json.dumps({"id": case.id}))


def read_case(case_dir) -> PatientCase:
    case_dir = Path(case_dir)
    meta = json.loads((case_dir / "case.json").read_text())
    return PatientCase(
        id=meta["id"],
        pet=read_volume(case_dir / "pet.evol"),
        ct=read_volume(case_dir / "ct.evol"),
        mask=read_volume(case_dir / "mask.evol"),
    )


# -- synthetic PET/CT phantom ---------------------------------------------

@dataclass
class PhantomParams:
    body_hu: float = 40.0          # soft-tissue mean HU inside the body
    air_hu: float = -1000.0
    pet_background_suv: float = 1.0
    pet_noise_sd: float = 0.05
    ct_noise_sd: float = 20.0
    peak_suv_range: tuple[float, float] = (4.0, 15.0)
    lesion_radius_range: tuple[float, float] = (2.0, 5.0)  # voxels
    mask_threshold: float = 0.4    # fraction of lesion peak


# with falloff exp(-K*rho^2), intensity hits 40% of peak exactly at rho=1,
# so the mask is the unit ellipsoid of each lesion
_FALLOFF = float(np.log(1.0 / 0.4))


def generate_phantom(seed: int, dims: tuple[int, int, int],
                     lesion_count_range: tuple[int, int],
                     params: PhantomParams | None = None) -> PatientCase:
    """Deterministic synthetic PET/CT case with ellipsoidal hot lesions."""
    params = params or PhantomParams()
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    lo, hi = lesion_count_range
    if not (0 <= lo <= hi <= 20):
        raise ValueError(f"lesion_count_range must lie in [0, 20], got {lesion_count_range}")
    rng = np.random.default_rng(seed)
    x, y, z = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                          indexing="ij")
    center = np.array([(d - 1) / 2.0 for d in dims])
    # body: axis-aligned ellipsoid filling ~80% of the grid
    body_radii = np.array([0.4 * d for d in dims])
    body = (((x - center[0]) / body_radii[0]) ** 2
            + ((y - center[1]) / body_radii[1]) ** 2
            + ((z - center[2]) / body_radii[2]) ** 2) <= 1.0

    # smooth CT background: low-frequency cosine perturbation of soft tissue
    phase = rng.uniform(0, 2 * np.pi, size=3)
    wobble = 30.0 * (np.cos(2 * np.pi * x / dims[0] + phase[0])
                     * np.cos(2 * np.pi * y / dims[1] + phase[1])
                     * np.cos(2 * np.pi * z / dims[2] + phase[2]))
    ct = np.where(body, params.body_hu + wobble, params.air_hu)
    ct = ct + rng.normal(0.0, params.ct_noise_sd, size=dims)

    pet_clean = np.where(body, params.pet_background_suv, 0.05)
    mask = np.zeros(dims, dtype=bool)
    n_lesions = int(rng.integers(lo, hi + 1))
    for _ in range(n_lesions):
        radii = rng.uniform(*params.lesion_radius_range, size=3)
        # keep the lesion core inside the body
        c = center + rng.uniform(-0.6, 0.6, size=3) * body_radii
        peak = rng.uniform(*params.peak_suv_range)
        rho2 = (((x - c[0]) / radii[0]) ** 2
                + ((y - c[1]) / radii[1]) ** 2
                + ((z - c[2]) / radii[2]) ** 2)
        pet_clean = pet_clean + peak * np.exp(-_FALLOFF * rho2)
        mask |= rho2 <= 1.0
    pet = pet_clean + rng.normal(0.0, params.pet_noise_sd, size=dims)

    spacing = (4.0, 4.0, 4.0)
    return PatientCase(
        id=f"phantom-{seed:06d}",
        pet=Volume(dims, spacing, "PET", pet.astype(np.float32)),
        ct=Volume(dims, spacing, "CT", ct.astype(np.float32)),
        mask=Volume(dims, spacing, "MASK", mask.astype(np.float32)),
    )


# -- dataset directories ---------------------------------------------------

def write_dataset(cases: list, splits: dict, out_dir):
    """Write case directories plus a split manifest (splits.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case in cases:
        write_case(case, out_dir / case.id)
    (out_dir / "splits.json").write_text(json.dumps(splits, indent=1))


def read_dataset(data_dir):
    """Returns ({case_id: PatientCase}, {split_name: [case_id]})."""
    data_dir = Path(data_dir)
    manifest = data_dir / "splits.json"
    if not manifest.exists():
        raise VolumeFormatError(f"{data_dir}: missing splits.json")
    splits = json.loads(manifest.read_text())
    cases = {}
    for ids in splits.values():
        for cid in ids:
            if cid not in cases:
                cases[cid] = read_case(data_dir / cid)
    return cases, splits


# -- dataset splits --------------------------------------------------------

def split_dataset(cases: list, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint (train, val, test) partition with a seed-deterministic shuffle."""
    if not cases:
        raise ValueError("empty case list")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    n = len(cases)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    for size, ratio in ((n_train, ratios[0]), (n_val, ratios[1]),
                        (n - n_train - n_val, ratios[2])):
        if ratio > 0 and size == 0:
            raise ValueError("not enough cases for a nonzero split ratio")
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])
