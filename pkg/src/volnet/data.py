"""Manifest-driven dataset handling.

Subjects live in a CSV manifest pointing at per-ROI volume files; each
stored ROI is a 33x33x33 volume (the 29^3 region of interest plus a
2-voxel margin on every side) so that shift augmentation is a pure crop.
Splits carve out a frozen 15-subject-per-class test set and re-partition
the rest into train and validation at a 9:1 ratio, re-shuffled every
epoch. Training batches are class-balanced on the fly: each draw picks a
uniform class, then a uniform subject of that class, then a random shift
of up to 2 voxels applied rigidly across the subject's ROIs.

A synthetic phantom generator stands in for clinical data: per class it
emits centered ellipsoids of class-dependent radius and boundary
sharpness, with a second pseudo-modality anticorrelated in intensity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor
from .errors import (
    DuplicateSubject,
    FormatError,
    InsufficientSubjects,
    InvalidConfig,
    InvalidLabel,
    IoError,
    ParseError,
)

LABELS = ("AD", "MCI", "NC")
ROI_NAMES = ("smri_l", "smri_r", "dti_l", "dti_r")
MANIFEST_COLUMNS = ("subject_id", "label") + ROI_NAMES

ROI_SIDE = 29
SHIFT_MARGIN = 2
PADDED_SIDE = ROI_SIDE + 2 * SHIFT_MARGIN  # 33

TEST_PER_CLASS = 15
VAL_DENOMINATOR = 10  # validation gets floor(remaining / 10) subjects

VVOL_MAGIC = b"VVOL1\n"


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

def write_volume(path: str | Path, t: np.ndarray) -> None:
    """Serialize a tensor as a vvol file (f32, little-endian, row-major)."""
    header = json.dumps({"shape": list(t.shape), "dtype": "f32le"}).encode("utf-8")
    payload = np.ascontiguousarray(t, dtype="<f4").tobytes()
    Path(path).write_bytes(VVOL_MAGIC + header + b"\0" + payload)


def read_volume(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(VVOL_MAGIC):
        raise FormatError(f"{path}: bad magic, not a vvol file")
    body = raw[len(VVOL_MAGIC):]
    sep = body.find(b"\0")
    if sep < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(body[:sep].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if dtype != "f32le":
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    if any(s < 1 for s in shape) or not shape:
        raise FormatError(f"{path}: invalid shape {shape}")
    expected = int(np.prod(shape)) * 4
    payload = body[sep + 1:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: str
    volumes: dict[str, Path]  # roi name ("smri_l", ...) -> resolved path


@dataclass
class Manifest:
    records: list[SubjectRecord]
    base_dir: Path

    def __post_init__(self):
        self.by_id = {r.subject_id: r for r in self.records}

    def ids_by_class(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for r in self.records:
            out.setdefault(r.label, []).append(r.subject_id)
        return out

    def classes(self) -> tuple[str, ...]:
        present = {r.label for r in self.records}
        return tuple(l for l in LABELS if l in present)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    base = path.parent
    records: list[SubjectRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ParseError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} cells")
            sid, label = row[0].strip(), row[1].strip()
            if not sid:
                raise ParseError(f"{path}:{lineno}: empty subject_id")
            if sid in seen:
                raise DuplicateSubject(f"{path}:{lineno}: duplicate subject {sid!r}")
            if label not in LABELS:
                raise InvalidLabel(f"{path}:{lineno}: unknown label {label!r}")
            seen.add(sid)
            volumes = {
                roi: base / cell.strip()
                for roi, cell in zip(ROI_NAMES, row[2:])
                if cell.strip()
            }
            records.append(SubjectRecord(sid, label, volumes))
    return Manifest(records, base)


def write_manifest_csv(path: str | Path, rows: list[tuple[str, str, dict[str, str]]]) -> None:
    """rows: (subject_id, label, {roi: relative path}) triples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for sid, label, vols in rows:
            writer.writerow([sid, label] + [vols.get(r, "") for r in ROI_NAMES])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    """Disjoint per-class subject-id lists; the test set is frozen."""

    train: dict[str, list[str]]
    validation: dict[str, list[str]]
    test: dict[str, list[str]]

    def counts(self) -> dict[str, tuple[int, int, int]]:
        return {
            c: (len(self.train[c]), len(self.validation[c]), len(self.test[c]))
            for c in self.train
        }


def _partition_train_val(pool: list[str], rng: np.random.Generator) -> tuple[list[str], list[str]]:
    pool = sorted(pool)
    rng.shuffle(pool)
    n_val = len(pool) // VAL_DENOMINATOR
    return pool[n_val:], pool[:n_val]


def split_dataset(manifest: Manifest, seed: int) -> DatasetSplit:
    """Per class: 15 test subjects, then a 9:1 train/validation partition."""
    rng = np.random.default_rng(seed)
    train: dict[str, list[str]] = {}
    val: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for label in manifest.classes():
        ids = sorted(manifest.ids_by_class()[label])
        if len(ids) < TEST_PER_CLASS + 1:
            raise InsufficientSubjects(
                f"class {label} has {len(ids)} subjects, needs >= {TEST_PER_CLASS + 1}"
            )
        rng.shuffle(ids)
        test[label] = sorted(ids[:TEST_PER_CLASS])
        train[label], val[label] = _partition_train_val(ids[TEST_PER_CLASS:], rng)
    return DatasetSplit(train, val, test)


def reshuffle_train_val(split: DatasetSplit, seed: int) -> DatasetSplit:
    """Re-partition train+validation per class; the test set never moves."""
    rng = np.random.default_rng(seed)
    train: dict[str, list[str]] = {}
    val: dict[str, list[str]] = {}
    for label in split.train:
        pool = split.train[label] + split.validation[label]
        train[label], val[label] = _partition_train_val(pool, rng)
    return DatasetSplit(train, val, {c: list(v) for c, v in split.test.items()})


def split_from_frozen_test(manifest: Manifest, test_ids: dict[str, list[str]], seed: int) -> DatasetSplit:
    """Rebuild a split around a previously frozen test set."""
    rng = np.random.default_rng(seed)
    train: dict[str, list[str]] = {}
    val: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    by_class = manifest.ids_by_class()
    for label in manifest.classes():
        frozen = test_ids.get(label, [])
        unknown = [i for i in frozen if i not in manifest.by_id]
        if unknown:
            raise InvalidConfig(f"frozen test ids not in manifest: {unknown}")
        test[label] = sorted(frozen)
        pool = [i for i in by_class[label] if i not in set(frozen)]
        train[label], val[label] = _partition_train_val(pool, rng)
    return DatasetSplit(train, val, test)


# ---------------------------------------------------------------------------
# ROI access and augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PaddedRoi:
    """A 33^3 stored ROI with its provenance."""

    tensor: np.ndarray  # [1, 33, 33, 33]
    subject_id: str
    roi_name: str


class RoiStore:
    """Loads and caches padded ROI volumes declared by a manifest."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[Path, np.ndarray] = {}

    def padded(self, subject_id: str, roi_name: str) -> PaddedRoi:
        record = self.manifest.by_id[subject_id]
        if roi_name not in record.volumes:
            raise InvalidConfig(f"subject {subject_id} has no {roi_name} volume")
        path = record.volumes[roi_name]
        arr = self._cache.get(path)
        if arr is None:
            arr = read_volume(path)
            if arr.shape == (PADDED_SIDE,) * 3:
                arr = arr[None]
            if arr.shape != (1,) + (PADDED_SIDE,) * 3:
                raise FormatError(
                    f"{path}: expected a {PADDED_SIDE}^3 padded ROI, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{path}: non-finite voxel values")
            self._cache[path] = arr
        return PaddedRoi(arr, subject_id, roi_name)

    def center_crop(self, subject_id: str, roi_name: str) -> np.ndarray:
        roi = self.padded(subject_id, roi_name)
        m = SHIFT_MARGIN
        return tensor.crop(roi.tensor, (0, m, m, m), (1,) + (ROI_SIDE,) * 3)


def shifted_crop(roi: PaddedRoi, shift: tuple[int, int, int]) -> np.ndarray:
    """Crop the 29^3 window displaced by an integer shift in [-2, 2]^3."""
    offset = (0,) + tuple(SHIFT_MARGIN + int(s) for s in shift)
    return tensor.crop(roi.tensor, offset, (1,) + (ROI_SIDE,) * 3)


def draw_shift(rng: np.random.Generator) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(-SHIFT_MARGIN, SHIFT_MARGIN + 1, size=3))


def augment_shift(roi: PaddedRoi, rng: np.random.Generator) -> np.ndarray:
    """Random up-to-2-voxel shift per axis, realized as an exact sub-array."""
    return shifted_crop(roi, draw_shift(rng))


# ---------------------------------------------------------------------------
# balanced batches and epoch accounting
# ---------------------------------------------------------------------------


def balanced_batch(
    store: RoiStore,
    train_ids: dict[str, list[str]],
    classes: tuple[str, ...],
    roi_names: tuple[str, ...],
    eta: int,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Draw eta samples: uniform class, uniform subject, one rigid shift.

    The same (dx, dy, dz) is applied to all of a subject's ROIs within
    one draw. Returns per-pipeline input batches and one-hot labels.
    """
    for c in classes:
        if not train_ids.get(c):
            raise InsufficientSubjects(f"class {c} has no training subjects")
    inputs = {
        name: np.empty((eta, 1) + (ROI_SIDE,) * 3, dtype=np.float32)
        for name in roi_names
    }
    targets = np.zeros((eta, len(classes)), dtype=np.float32)
    for i in range(eta):
        ci = int(rng.integers(len(classes)))
        ids = train_ids[classes[ci]]
        sid = ids[int(rng.integers(len(ids)))]
        shift = draw_shift(rng)
        for name in roi_names:
            inputs[name][i] = shifted_crop(store.padded(sid, name), shift)
        targets[i, ci] = 1.0
    return inputs, targets


def epoch_plan(n_train_subjects: int, tau: int, eta: int) -> tuple[int, int]:
    """(images per epoch, training iterations per epoch)."""
    if n_train_subjects < 1 or tau < 1 or eta < 1:
        raise InvalidConfig("epoch plan arguments must all be positive")
    images = tau * n_train_subjects
    return images, images // eta


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomClassSpec:
    label: str
    radius: float  # mean ellipsoid radius in voxels
    edge_width: float  # sigmoid boundary width; larger = more diffuse


def default_class_specs(n_classes: int) -> list[PhantomClassSpec]:
    """Radius gap of 3 voxels between adjacent classes, AD most atrophied."""
    if n_classes == 2:
        chosen = ("AD", "NC")
    elif n_classes == 3:
        chosen = ("AD", "MCI", "NC")
    else:
        raise InvalidConfig(f"phantom generator supports 2 or 3 classes, got {n_classes}")
    return [
        PhantomClassSpec(label, radius=6.0 + 3.0 * i, edge_width=2.0 - 0.5 * i)
        for i, label in enumerate(chosen)
    ]


def _phantom_volumes(
    spec: PhantomClassSpec, rng: np.random.Generator, noise_sigma: float
) -> dict[str, np.ndarray]:
    coords = np.arange(PADDED_SIDE, dtype=np.float64)
    center0 = (PADDED_SIDE - 1) / 2.0
    out: dict[str, np.ndarray] = {}
    for side in ("l", "r"):
        radius = spec.radius + rng.uniform(-0.75, 0.75)
        axes = radius * rng.uniform(0.9, 1.1, size=3)
        center = center0 + rng.uniform(-1.0, 1.0, size=3)
        brightness = rng.uniform(0.9, 1.1)
        zz = ((coords - center[0]) / axes[0]) ** 2
        yy = ((coords - center[1]) / axes[1]) ** 2
        xx = ((coords - center[2]) / axes[2]) ** 2
        dist = np.sqrt(zz[:, None, None] + yy[None, :, None] + xx[None, None, :])
        body = brightness / (1.0 + np.exp((dist - 1.0) * radius / spec.edge_width))
        anti = brightness * (1.0 - body / brightness)  # pseudo-MD contrast
        for modality, clean in (("smri", body), ("dti", anti)):
            vol = clean + rng.normal(0.0, noise_sigma, clean.shape)
            out[f"{modality}_{side}"] = vol.astype(np.float32)
    return out


def generate_phantoms(
    class_specs: list[PhantomClassSpec],
    n_per_class: int,
    seed: int,
    out_dir: str | Path,
    noise_sigma: float = 0.1,
) -> Path:
    """Write a synthetic dataset (vvol volumes + manifest.csv); returns the manifest path."""
    if len(class_specs) < 2:
        raise InvalidConfig("need at least two phantom classes")
    if n_per_class < TEST_PER_CLASS + 1:
        raise InvalidConfig(
            f"need >= {TEST_PER_CLASS + 1} subjects per class for a valid split, got {n_per_class}"
        )
    labels = [s.label for s in class_specs]
    if len(set(labels)) != len(labels):
        raise InvalidConfig(f"duplicate phantom class labels: {labels}")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "vols"
    try:
        vol_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {vol_dir}: {exc}") from exc
    rows: list[tuple[str, str, dict[str, str]]] = []
    try:
        for ci, spec in enumerate(class_specs):
            for si in range(n_per_class):
                rng = np.random.default_rng([seed, ci, si])
                sid = f"{spec.label}{si:03d}"
                vols = _phantom_volumes(spec, rng, noise_sigma)
                rels: dict[str, str] = {}
                for roi, vol in vols.items():
                    rel = f"vols/{sid}_{roi}.vvol"
                    write_volume(out_dir / rel, vol)
                    rels[roi] = rel
                rows.append((sid, spec.label, rels))
        manifest_path = out_dir / "manifest.csv"
        write_manifest_csv(manifest_path, rows)
    except OSError as exc:
        raise IoError(f"cannot write dataset under {out_dir}: {exc}") from exc
    return manifest_path
