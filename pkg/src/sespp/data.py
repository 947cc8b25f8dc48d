"""Synthetic two-channel PET/CT-like ROI cohorts, patient-level splits, augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as pltn

RESISTANT, SENSITIVE = "resistant", "sensitive"
LABELS = {RESISTANT: 1, SENSITIVE: 0}


@dataclass
class Sample:
    ct: np.ndarray
    pet: np.ndarray
    provenance: str = "original"

    def __post_init__(self):
        if self.ct.shape != self.pet.shape or self.ct.ndim != 2:
            raise ValueError(f"CT {self.ct.shape} and PET {self.pet.shape} must be equal 2-d maps")


@dataclass
class PatientRecord:
    patient_id: str
    label: str
    slices: list = field(default_factory=list)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def y(self) -> int:
        return LABELS[self.label]


@dataclass(frozen=True)
class CohortSpec:
    n_resistant: int = 97
    n_sensitive: int = 192
    slices_per_patient: tuple = (2, 4)
    image_size: int = 64
    class_signal: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_resistant < 1 or self.n_sensitive < 1:
            raise ValueError("cohort needs at least one patient of each class")
        lo, hi = self.slices_per_patient
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid slices_per_patient {self.slices_per_patient}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.class_signal <= 1.0:
            raise ValueError("class_signal must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slices_per_patient"] = list(self.slices_per_patient)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        d["slices_per_patient"] = tuple(d["slices_per_patient"])
        return cls(**d)


# ---------------------------------------------------------------------------
# generator


def _blob(yy, xx, cy, cx, radius):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))


def _patient(spec: CohortSpec, index: int, resistant: bool) -> list[Sample]:
    """All slices of one synthetic patient; a pure function of (spec, index, label)."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    n_slices = int(rng.integers(spec.slices_per_patient[0], spec.slices_per_patient[1] + 1))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # patient-level anatomy, shared by both classes
    cy, cx = rng.uniform(0.3, 0.7, size=2) * s
    base_radius = rng.uniform(0.08, 0.14) * s
    # circular body: a 90-degree rotation must not reveal which slices were augmented
    body = np.clip(1.0 - ((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / (0.47 * s) ** 2, 0, None)
    tumor_density = rng.uniform(0.35, 0.55)
    uptake = rng.uniform(0.9, 1.3)
    pet_gain = rng.uniform(0.85, 1.15)
    sig = spec.class_signal if resistant else 0.0

    slices = []
    for k in range(n_slices):
        frac = (k + 0.5) / n_slices
        radius = base_radius * (0.75 + 0.5 * np.sin(np.pi * frac))
        oy, ox = rng.normal(0, 0.02 * s, size=2)
        tumor = _blob(yy, xx, cy + oy, cx + ox, radius)

        texture = gaussian_filter(rng.standard_normal((s, s)), sigma=s / 16) * 4.0
        ct = 0.6 * body + 0.15 * texture + tumor * (tumor_density - 0.1 * sig)
        ct += 0.08 * rng.standard_normal((s, s))

        hetero = gaussian_filter(rng.standard_normal((s, s)), sigma=1.0) * 3.0
        organ = _blob(yy, xx, *rng.uniform(0.15, 0.85, size=2) * s, 0.06 * s) * rng.uniform(0.3, 0.7)
        lesion = tumor * (uptake + 1.0 * sig) * (1.0 + 0.5 * sig * hetero)
        pet = pet_gain * (0.15 * body + organ + lesion)
        pet += 0.05 * rng.standard_normal((s, s))
        slices.append(Sample(ct.astype(np.float32), pet.astype(np.float32)))
    return slices


def generate_cohort(spec: CohortSpec) -> list[PatientRecord]:
    """Deterministic synthetic cohort.

    Resistant patients get a brighter, heterogeneous PET lesion and a slightly
    hypodense CT lesion, both scaled by ``class_signal``; at zero signal the
    two classes come from the same distribution.
    """
    spec.validate()
    labels = np.array([RESISTANT] * spec.n_resistant + [SENSITIVE] * spec.n_sensitive)
    np.random.default_rng(spec.seed).shuffle(labels)
    records = []
    for i, label in enumerate(labels):
        slices = _patient(spec, i, label == RESISTANT)
        records.append(PatientRecord(f"P{i + 1:04d}", str(label), slices))
    return records


# ---------------------------------------------------------------------------
# image transforms


def bilinear_resize(img: np.ndarray, target: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-d map to ``target`` x ``target``."""
    H, W = img.shape
    if H < 2 or W < 2:
        raise ValueError(f"cannot resize a degenerate {H}x{W} image")
    if (H, W) == (target, target):
        return img.copy()
    src = img.astype(np.float64)

    def axis(n_in):
        pos = np.arange(target) * ((n_in - 1) / (target - 1)) if target > 1 else np.zeros(1)
        i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return i0, pos - i0

    r0, fr = axis(H)
    c0, fc = axis(W)
    top = src[r0][:, c0] + fc * (src[r0][:, c0 + 1] - src[r0][:, c0])
    bot = src[r0 + 1][:, c0] + fc * (src[r0 + 1][:, c0 + 1] - src[r0 + 1][:, c0])
    out = top + fr[:, None] * (bot - top)
    return out.astype(img.dtype)


def stack_and_resize(s: Sample, target: int) -> np.ndarray:
    """(2, target, target) array: channel 0 is CT, channel 1 is PET."""
    return np.stack([bilinear_resize(s.ct, target), bilinear_resize(s.pet, target)])


def balance_minority(records: Sequence[PatientRecord]) -> list[PatientRecord]:
    """Give every slice of the class with fewer slices one counterclockwise 90-degree copy."""
    counts = {label: 0 for label in LABELS}
    for r in records:
        counts[r.label] += len(r.slices)
    if counts[RESISTANT] == counts[SENSITIVE]:
        return list(records)
    minority = min(counts, key=counts.get)
    out = []
    for r in records:
        if r.label != minority:
            out.append(r)
            continue
        originals = [s for s in r.slices if s.provenance != "rotated90"]
        rotated = [Sample(np.rot90(s.ct).copy(), np.rot90(s.pet).copy(), "rotated90") for s in originals]
        out.append(PatientRecord(r.patient_id, r.label, list(r.slices) + rotated))
    return out


# ---------------------------------------------------------------------------
# patient-level folds


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    folds: dict
    k: int

    def fold_of(self, patient_id: str) -> int:
        return self.folds[patient_id]

    def subsets(self, fold: int) -> tuple[list, list, list]:
        """(train, val, test) patient ids: test is ``fold``, validation the next fold."""
        val_fold = (fold + 1) % self.k
        train, val, test = [], [], []
        for pid, f in self.folds.items():
            if f == fold:
                test.append(pid)
            elif f == val_fold:
                val.append(pid)
            else:
                train.append(pid)
        return train, val, test

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "folds": self.folds}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls({str(k): int(v) for k, v in d["folds"].items()}, int(d["k"]))


def make_split(records: Sequence[PatientRecord], k: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified patient-level folds.

    Patients of each class are shuffled, resistant first, then dealt
    round-robin over the folds with one counter running across both classes.
    """
    if k < 3:
        raise SplitError(f"need at least three folds (test, validation, training), got {k}")
    by_label = {label: sorted(r.patient_id for r in records if r.label == label) for label in LABELS}
    for label, ids in by_label.items():
        if len(ids) < k:
            raise SplitError(f"{len(ids)} {label} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = []
    for label in (RESISTANT, SENSITIVE):
        ids = by_label[label]
        order.extend(ids[i] for i in rng.permutation(len(ids)))
    return SplitPlan({pid: i % k for i, pid in enumerate(order)}, k)


# ---------------------------------------------------------------------------
# arrays, normalization, augmentation


def to_arrays(records: Sequence[PatientRecord], patient_ids: Optional[Sequence[str]] = None,
              size: Optional[int] = None, channels: str = "multimodal"):
    """Stack slices into (X[N, C, S, S], y[N], patient_ids[N]).

    ``channels="ct_only"`` keeps channel 0 (CT) and drops PET.
    """
    wanted = None if patient_ids is None else set(patient_ids)
    xs, ys, pids = [], [], []
    for r in records:
        if wanted is not None and r.patient_id not in wanted:
            continue
        for s in r.slices:
            target = size or s.ct.shape[0]
            xs.append(stack_and_resize(s, target))
            ys.append(r.y)
            pids.append(r.patient_id)
    if not xs:
        raise ValueError("no slices selected")
    X = np.stack(xs).astype(np.float32)
    if channels == "ct_only":
        X = X[:, :1].copy()
    elif channels != "multimodal":
        raise ValueError(f"unknown modality {channels!r}")
    return X, np.array(ys, dtype=np.float32), np.array(pids)


NORM_EPS = 1e-8


@dataclass
class Normalizer:
    """Per-channel standardization with statistics fitted on training images only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X64 = X.astype(np.float64)
        mean = X64.mean(axis=(0, 2, 3))
        std = X64.std(axis=(0, 2, 3))
        return cls(mean, np.maximum(std, NORM_EPS))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        m = self.mean.reshape(1, -1, 1, 1)
        s = self.std.reshape(1, -1, 1, 1)
        return ((X - m) / s).astype(np.float32)


def vertical_flip(X: np.ndarray) -> np.ndarray:
    return X[..., ::-1, :].copy()


class Augmenter:
    """Random vertical flips (train batches only) followed by normalization."""

    def __init__(self, normalizer: Normalizer, flip_prob: float = 0.5):
        self.normalizer = normalizer
        self.flip_prob = flip_prob
        self.flip_calls = 0

    def flip(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        self.flip_calls += 1
        mask = rng.random(len(X)) < self.flip_prob
        if not mask.any():
            return X
        X = X.copy()
        X[mask] = X[mask][..., ::-1, :]
        return X

    def train_batch(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.normalizer(self.flip(X, rng))

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        return self.normalizer(X)


def train_time_augment(batch: np.ndarray, rng: np.random.Generator, normalizer: Normalizer,
                       flip_prob: float = 0.5) -> np.ndarray:
    return Augmenter(normalizer, flip_prob).train_batch(batch, rng)


# ---------------------------------------------------------------------------
# on-disk cohort


def save_cohort(records: Sequence[PatientRecord], spec: CohortSpec, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in records:
        d = root / r.patient_id
        d.mkdir(exist_ok=True)
        pltn.atomic_write_text(d / "label.txt", r.label + "\n")
        for i, s in enumerate(r.slices):
            pltn.save_tensor(d / f"slice_{i:03d}.ct.pltn", s.ct)
            pltn.save_tensor(d / f"slice_{i:03d}.pet.pltn", s.pet)
    meta = {"spec": spec.to_dict(), "seed": spec.seed, "patients": len(records)}
    pltn.atomic_write_text(root / "cohort.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_cohort(root) -> tuple[CohortSpec, list[PatientRecord]]:
    root = Path(root)
    meta_path = root / "cohort.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no cohort.json under {root}")
    spec = CohortSpec.from_dict(json.loads(meta_path.read_text())["spec"])
    records = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("P")):
        label = (d / "label.txt").read_text().strip()
        slices = []
        for ct_path in sorted(d.glob("slice_*.ct.pltn")):
            pet_path = ct_path.with_name(ct_path.name.replace(".ct.", ".pet."))
            slices.append(Sample(pltn.load_tensor(ct_path), pltn.load_tensor(pet_path)))
        records.append(PatientRecord(d.name, label, slices))
    return spec, records
