"""Desk-scale FAUST substitute and FAUST-compatible ingestion.

A synthetic dataset is 10 classes ("poses") x 10 subjects of deformed
icospheres sharing one connectivity. Each class is a smooth radial or
axial deformation pattern; each subject adds its own smooth variation,
which is shared across classes so identity carries no class information.
Every mesh is normalized to its centroid and unit bounding sphere.

Split rule, per class (the within-class index is the subject id):
subjects 0-6 train, subject 7 validation, subject 8 validation for even
classes and test for odd ones, subject 9 test. That gives 70/15/15.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InconsistentTopologyError, LabelParseError
from .mesh import Mesh, icosphere, load_mesh, save_mesh

N_CLASSES = 10
N_SUBJECTS = 10
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"
_CSS_PATTERN = re.compile(r"^tr_reg_(\d)(\d\d)$")
_FAUST_PATTERN = re.compile(r"^tr_reg_(\d{3})$")


@dataclass(frozen=True)
class Normalization:
    """Forward map ``(X - centroid) / scale``; :meth:`inverse` undoes it."""

    centroid: np.ndarray
    scale: float

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.centroid) / self.scale

    def inverse(self, X):
        return np.asarray(X, dtype=np.float64) * self.scale + self.centroid


@dataclass(eq=False)
class LabeledMesh:
    mesh: Mesh
    label: int
    subject: int
    split: str
    path: str = ""
    normalization: Normalization | None = None


@dataclass(eq=False)
class Dataset:
    items: list
    n_classes: int = N_CLASSES
    seed: int | None = None
    source: str = "synthetic"

    def __len__(self):
        return len(self.items)

    def split(self, name: str) -> list:
        return [item for item in self.items if item.split == name]

    def indices(self, name: str) -> list[int]:
        return [i for i, item in enumerate(self.items) if item.split == name]

    def write(self, directory) -> Path:
        """Save every mesh as OFF plus a JSON-lines manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for item in self.items:
            name = item.path or f"tr_reg_{item.label}{item.subject:02d}.off"
            save_mesh(item.mesh, directory / name)
            record = {"path": name, "class": item.label, "subject": item.subject, "split": item.split}
            if item.normalization is not None:
                record["centroid"] = item.normalization.centroid.tolist()
                record["scale"] = item.normalization.scale
            if self.seed is not None:
                record["seed"] = self.seed
            lines.append(json.dumps(record, sort_keys=True))
        (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
        return directory


def normalize(mesh: Mesh) -> tuple[Mesh, Normalization]:
    """Center on the vertex centroid and scale to the unit bounding sphere."""
    centroid = mesh.vertices.mean(axis=0)
    scale = float(np.linalg.norm(mesh.vertices - centroid, axis=1).max())
    record = Normalization(centroid, scale)
    return mesh.with_vertices(record.apply(mesh.vertices)), record


def stratified_split(label: int, subject: int) -> str:
    if subject <= 6:
        return "train"
    if subject == 7:
        return "val"
    if subject == 8:
        return "val" if label % 2 == 0 else "test"
    return "test"


# --------------------------------------------------------------------------
# synthetic shapes; y is the vertical axis

def _spherical(p):
    h = p[:, 1]
    rho = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2)
    phi = np.arctan2(p[:, 2], p[:, 0])
    return h, rho, phi


def class_deformation(label: int, p: np.ndarray, amplitude: float, phase: float) -> np.ndarray:
    """Displacement of unit-sphere points ``p`` for a class pattern."""
    h, rho, phi = _spherical(p)
    a = amplitude
    phi = phi + phase
    radial = np.zeros(len(p))
    axial = np.zeros(len(p))
    if label == 0:        # tall
        axial = a * h
    elif label == 1:      # squat
        axial = -0.8 * a * h
    elif label == 2:      # two equatorial lobes
        radial = a * np.cos(2 * phi) * rho ** 2
    elif label == 3:      # three equatorial lobes
        radial = a * np.cos(3 * phi) * rho ** 3
    elif label == 4:      # cap bulge
        radial = 1.2 * a * np.exp(-((h - 1.0) ** 2) / 0.3)
    elif label == 5:      # waist pinch
        radial = -a * np.exp(-(h ** 2) / 0.15)
    elif label == 6:      # egg
        radial = 0.8 * a * h
    elif label == 7:      # stacked rings
        radial = a * np.cos(3 * np.pi * h) * rho
    elif label == 8:      # twisted lobes
        radial = a * np.cos(2 * phi + 3 * h) * rho ** 2
    elif label == 9:      # bend
        radial = a * np.cos(phi) * np.sin(np.pi * h) * rho
    else:
        raise ValueError(f"no synthetic pattern for class {label}")
    disp = radial[:, None] * p
    disp[:, 1] += axial
    return disp


def subject_deformation(rng: np.random.Generator, p: np.ndarray, amplitude: float) -> np.ndarray:
    """Random smooth identity variation: anisotropic scale plus low-order radial bumps."""
    h, rho, phi = _spherical(p)
    scale = 1.0 + rng.uniform(-0.08, 0.08, size=3)
    radial = np.zeros(len(p))
    for _ in range(4):
        m = rng.integers(0, 3)
        freq = rng.uniform(0.5, 2.0)
        radial += rng.normal(0, amplitude) * np.cos(m * phi + rng.uniform(0, 2 * np.pi)) * np.cos(freq * np.pi * h + rng.uniform(0, 2 * np.pi))
    return p * scale - p + radial[:, None] * p


def generate_synthetic(seed: int = 0, subdivision: int = 3, class_amplitude: float = 0.25,
                       subject_amplitude: float = 0.04) -> Dataset:
    """100 labelled meshes on a common icosphere connectivity."""
    base = icosphere(subdivision)
    n = base.n_vertices
    if not 500 <= n <= 4000:
        raise ValueError(f"subdivision {subdivision} gives {n} vertices; need 500..4000")
    p = base.vertices
    rng = np.random.default_rng(seed)
    subjects = []
    for _ in range(N_SUBJECTS):
        subjects.append((subject_deformation(rng, p, subject_amplitude), rng.uniform(0, 2 * np.pi)))
    items = []
    for label in range(N_CLASSES):
        for s, (sdisp, phase) in enumerate(subjects):
            X = p + sdisp + class_deformation(label, p, class_amplitude, phase)
            mesh, record = normalize(base.with_vertices(X))
            items.append(LabeledMesh(mesh, label, s, stratified_split(label, s),
                                     f"tr_reg_{label}{s:02d}.off", record))
    return Dataset(items, N_CLASSES, seed, "synthetic")


# --------------------------------------------------------------------------
# ingestion

def parse_label(stem: str, scheme: str = "css") -> tuple[int, int]:
    """(class, subject) from a file stem.

    ``css``: ``tr_reg_CSS`` with one class digit and two subject digits.
    ``faust``: ``tr_reg_NNN`` with NNN = 10 * subject + pose, class = pose.
    """
    if scheme == "css":
        m = _CSS_PATTERN.match(stem)
        if m:
            return int(m.group(1)), int(m.group(2))
    elif scheme == "faust":
        m = _FAUST_PATTERN.match(stem)
        if m:
            idx = int(m.group(1))
            return idx % 10, idx // 10
    else:
        raise ValueError(f"unknown label scheme {scheme!r}")
    raise LabelParseError(f"cannot parse a label from {stem!r} with scheme {scheme!r}")


def hash_split(keys: list[tuple[int, int]]) -> list[str]:
    """70/15/15 split ordered by a hash of (subject, pose)."""
    digest = lambda k: hashlib.sha256(f"{k[0]}:{k[1]}".encode()).hexdigest()
    order = sorted(range(len(keys)), key=lambda i: (digest(keys[i]), i))
    n = len(keys)
    n_train = int(round(0.70 * n))
    n_val = int(round(0.15 * n))
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


def _check_topology(items):
    ref = items[0].mesh
    for item in items[1:]:
        if item.mesh.n_vertices != ref.n_vertices:
            raise InconsistentTopologyError(
                f"{item.path}: {item.mesh.n_vertices} vertices, expected {ref.n_vertices}")
        if item.mesh.faces.shape != ref.faces.shape or not np.array_equal(item.mesh.faces, ref.faces):
            raise InconsistentTopologyError(f"{item.path}: face connectivity differs")


def ingest_directory(path, label_scheme: str = "css", normalize_meshes: bool = True) -> Dataset:
    """Load a directory of OFF/OBJ meshes, using ``manifest.jsonl`` when present."""
    directory = Path(path)
    manifest = directory / MANIFEST_NAME
    items = []
    if manifest.exists():
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                name, label, subject, split = rec["path"], int(rec["class"]), int(rec["subject"]), rec["split"]
            except (ValueError, KeyError) as exc:
                raise LabelParseError(f"{manifest}:{lineno}: {exc}") from None
            if split not in SPLITS:
                raise LabelParseError(f"{manifest}:{lineno}: unknown split {split!r}")
            items.append(LabeledMesh(load_mesh(directory / name), label, subject, split, name))
    else:
        files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".off", ".obj"))
        keys = []
        for f in files:
            label, subject = parse_label(f.stem, label_scheme)
            keys.append((subject, label))
            items.append(LabeledMesh(load_mesh(f), label, subject, "", f.name))
        for item, split in zip(items, hash_split(keys)):
            item.split = split
    if not items:
        raise LabelParseError(f"no meshes found in {directory}")
    _check_topology(items)
    if normalize_meshes:
        for item in items:
            item.mesh, item.normalization = normalize(item.mesh)
    n_classes = max(N_CLASSES, max(item.label for item in items) + 1)
    return Dataset(items, n_classes, None, str(directory))
