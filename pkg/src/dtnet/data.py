"""Point files, dataset manifests and synthetic shape datasets.

xyz grammar (one point per line)::

    line    := blank | comment | point
    comment := optional whitespace, '#', anything
    point   := x y z [label]     whitespace separated; x, y, z real; label int

Either every point line carries a label or none does. ``#`` also starts a
trailing comment on a point line.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from .geometry import PointCloud

logger = logging.getLogger(__name__)

__all__ = [
    "XyzParseError",
    "ManifestError",
    "PointDataset",
    "DatasetManifest",
    "parse_xyz",
    "parse_xyz_text",
    "render_xyz",
    "write_xyz",
    "sample_sphere",
    "sample_box",
    "sample_torus",
    "sample_sphere_with_handle",
    "synth_classification",
    "synth_segmentation",
]

MANIFEST_NAME = "manifest.json"
CLASSIFICATION_SHAPES = ("sphere", "cube", "torus")


class XyzParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ManifestError(ValueError):
    pass


def parse_xyz_text(text: str) -> PointCloud:
    coords, labels = [], []
    ncols = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise XyzParseError(f"expected 3 or 4 columns, got {len(tokens)}", lineno)
        if ncols is None:
            ncols = len(tokens)
        elif len(tokens) != ncols:
            raise XyzParseError(f"expected {ncols} columns like the first point, got {len(tokens)}", lineno)
        try:
            coords.append([float(t) for t in tokens[:3]])
            if ncols == 4:
                labels.append(int(tokens[3]))
        except ValueError:
            raise XyzParseError(f"non-numeric token in {line!r}", lineno) from None
    if not coords:
        raise XyzParseError("no points", 0)
    arr = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise XyzParseError("non-finite coordinate", 0)
    return PointCloud(arr, labels=np.asarray(labels, dtype=np.int64) if ncols == 4 else None)


def parse_xyz(file) -> PointCloud:
    """Read a point cloud from a path or an open text file."""
    if isinstance(file, (str, os.PathLike)):
        with open(file, encoding="utf-8") as fh:
            return parse_xyz_text(fh.read())
    return parse_xyz_text(file.read())


def render_xyz(cloud: PointCloud, labels=None) -> str:
    """Six significant digits per coordinate; labels appended when given."""
    labels = cloud.labels if labels is None else np.asarray(labels)
    buf = io.StringIO()
    for i, p in enumerate(cloud.coords):
        buf.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}")
        if labels is not None:
            buf.write(f" {int(labels[i])}")
        buf.write("\n")
    return buf.getvalue()


def write_xyz(path, cloud: PointCloud, labels=None) -> None:
    Path(path).write_text(render_xyz(cloud, labels), encoding="utf-8")


@dataclass
class PointDataset:
    """In-memory split: equal-size clouds stacked into one array."""

    coords: np.ndarray  # [I, N, 3]
    labels: np.ndarray  # [I] (classification) or [I, N] (segmentation)
    task: str
    label_names: list[str]
    categories: dict[str, list[int]] = field(default_factory=dict)
    instance_category: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coords.ndim != 3 or self.coords.shape[-1] != 3:
            raise ValueError(f"coords must be [I, N, 3], got {self.coords.shape}")
        expected = self.coords.shape[:1] if self.task == "classification" else self.coords.shape[:2]
        if self.labels.shape != expected:
            raise ValueError(f"labels {self.labels.shape} do not fit coords {self.coords.shape}")
        if self.task == "segmentation":
            if not self.categories:
                self.categories = {"object": list(range(len(self.label_names)))}
            if self.instance_category is None:
                self.instance_category = np.zeros(len(self.coords), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def subset(self, idx) -> PointDataset:
        idx = np.asarray(idx)
        ic = None if self.instance_category is None else self.instance_category[idx]
        return PointDataset(self.coords[idx], self.labels[idx], self.task, self.label_names, self.categories, ic)


@dataclass
class DatasetManifest:
    """A directory of xyz files plus ``manifest.json`` describing splits.

    Split entries are ``{"file": relpath, "label": k}`` for classification and
    ``{"file": relpath, "category": name}`` for segmentation (labels live in
    the xyz label column).
    """

    root: Path
    task: str
    labels: list[str]
    splits: dict[str, list[dict]]
    categories: dict[str, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ManifestError(f"{path}: {exc}") from None
        try:
            return cls(
                root=path.parent,
                task=raw["task"],
                labels=list(raw["labels"]),
                splits={k: list(v) for k, v in raw["splits"].items()},
                categories={k: list(v) for k, v in raw.get("categories", {}).items()},
                meta=raw.get("meta", {}),
            )
        except KeyError as exc:
            raise ManifestError(f"{path}: missing field {exc.args[0]}") from None

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / MANIFEST_NAME
        body = {
            "format": "dtnet-manifest",
            "version": 1,
            "task": self.task,
            "labels": self.labels,
            "splits": self.splits,
            "categories": self.categories,
            "meta": self.meta,
        }
        path.write_text(json.dumps(body, indent=1, sort_keys=True), encoding="utf-8")
        return path

    def dataset(self, split: str) -> PointDataset:
        if split not in self.splits:
            raise ManifestError(f"no split named {split!r}")
        K = len(self.labels)
        cat_names = list(self.categories)
        coords, labels, cats = [], [], []
        for entry in self.splits[split]:
            f = self.root / entry["file"]
            if not f.exists():
                raise ManifestError(f"listed file {f} does not exist")
            cloud = parse_xyz(f)
            if self.task == "classification":
                lab = int(entry["label"])
                if not 0 <= lab < K:
                    raise ManifestError(f"{f}: label {lab} outside [0, {K})")
                labels.append(lab)
            else:
                if cloud.labels is None:
                    raise ManifestError(f"{f}: segmentation files need a label column")
                if cloud.labels.min() < 0 or cloud.labels.max() >= K:
                    raise ManifestError(f"{f}: part labels outside [0, {K})")
                labels.append(cloud.labels)
                cat = entry.get("category")
                cats.append(cat_names.index(cat) if cat in cat_names else 0)
            coords.append(cloud.coords)
        if not coords:
            raise ManifestError(f"split {split!r} is empty")
        if len({c.shape for c in coords}) != 1:
            raise ManifestError(f"split {split!r} mixes point counts; resample to a common N")
        return PointDataset(
            np.stack(coords),
            np.asarray(labels) if self.task == "classification" else np.stack(labels),
            self.task,
            self.labels,
            self.categories,
            np.asarray(cats, dtype=np.int64) if self.task == "segmentation" else None,
        )

    def validate(self) -> None:
        """Parse every listed file and check labels; raises on the first problem."""
        for split in self.splits:
            self.dataset(split)


# ---------------------------------------------------------------------------
# synthetic shapes


def sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.standard_normal((n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sample_box(n: int, half_extents, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box centered at 0."""
    a = np.asarray(half_extents, dtype=np.float64)
    # face pairs normal to x, y, z have areas proportional to a_y a_z, ...
    areas = np.array([a[1] * a[2], a[0] * a[2], a[0] * a[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    p = rng.uniform(-1.0, 1.0, (n, 3)) * a
    sign = rng.choice([-1.0, 1.0], size=n)
    p[np.arange(n), axis] = sign * a[axis]
    return p


def sample_torus(n: int, R: float, r: float, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform torus samples (rejection on the tube angle)."""
    out = np.empty((0, 2))
    while len(out) < n:
        theta = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1, 2 * n) < (R + r * np.cos(theta)) / (R + r)
        out = np.concatenate([out, np.stack([theta[keep], rng.uniform(0, 2 * np.pi, keep.sum())], 1)])
    theta, phi = out[:n, 0], out[:n, 1]
    ring = R + r * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)], axis=1)


def _normalize_about_origin(p: np.ndarray) -> np.ndarray:
    return p / np.linalg.norm(p, axis=1).max()


def _classification_instance(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        p = sample_sphere(n, rng)
    elif shape == "cube":
        p = sample_box(n, rng.uniform(0.7, 1.0, 3), rng)
    elif shape == "torus":
        p = sample_torus(n, 1.0, rng.uniform(0.25, 0.45), rng)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    p = p * rng.uniform(0.5, 1.5)
    p = Rotation.random(random_state=rng).apply(p)
    return _normalize_about_origin(p)


def _handle_areas(rc: float, length: float) -> tuple[float, float, float, float]:
    z0 = np.sqrt(1.0 - rc * rc)
    sphere = 4 * np.pi - 2 * np.pi * (1.0 - z0)
    lateral = 2 * np.pi * rc * length
    cap = np.pi * rc * rc
    return z0, sphere, lateral, cap


def handle_fraction(rc: float, length: float) -> float:
    """Expected share of points on the handle for given radius and length."""
    _, sphere, lateral, cap = _handle_areas(rc, length)
    return (lateral + cap) / (sphere + lateral + cap)


def sample_sphere_with_handle(n: int, rc: float, length: float, rng: np.random.Generator):
    """Unit sphere with an open-ended cylinder capped at the far end.

    Returns ``(points, part_labels)``; part 0 is the sphere, part 1 the handle.
    Each point picks its primitive with probability proportional to the
    primitive's visible area, so part counts are binomial.
    """
    z0, sphere, lateral, cap = _handle_areas(rc, length)
    n_handle = rng.binomial(n, (lateral + cap) / (sphere + lateral + cap))
    n_sphere = n - n_handle
    body = np.empty((0, 3))
    while len(body) < n_sphere:
        s = sample_sphere(2 * n_sphere + 8, rng)
        body = np.concatenate([body, s[s[:, 2] <= z0]])
    body = body[:n_sphere]
    on_cap = rng.uniform(0, 1, n_handle) < cap / (lateral + cap)
    phi = rng.uniform(0, 2 * np.pi, n_handle)
    rad = np.where(on_cap, rc * np.sqrt(rng.uniform(0, 1, n_handle)), rc)
    z = np.where(on_cap, z0 + length, rng.uniform(z0, z0 + length, n_handle))
    handle = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    pts = np.concatenate([body, handle])
    labels = np.concatenate([np.zeros(n_sphere, np.int64), np.ones(n_handle, np.int64)])
    order = rng.permutation(n)
    return pts[order], labels[order]


def make_classification_arrays(n_points: int, n_per_class: int, seed: int, shapes=CLASSIFICATION_SHAPES):
    rng = np.random.default_rng(seed)
    coords, labels = [], []
    for i in range(n_per_class):
        for k, shape in enumerate(shapes):
            coords.append(_classification_instance(shape, n_points, rng))
            labels.append(k)
    return np.stack(coords), np.asarray(labels)


def make_segmentation_arrays(n_points: int, n_instances: int, seed: int):
    rng = np.random.default_rng(seed)
    coords, labels, expected = [], [], []
    for _ in range(n_instances):
        while True:
            rc, length = rng.uniform(0.2, 0.3), rng.uniform(0.6, 1.0)
            p, lab = sample_sphere_with_handle(n_points, rc, length, rng)
            if 0 < lab.sum() < n_points:
                break
        p = Rotation.random(random_state=rng).apply(p)
        p -= p.mean(axis=0)
        coords.append(_normalize_about_origin(p))
        labels.append(lab)
        expected.append(handle_fraction(rc, length))
    return np.stack(coords), np.stack(labels), np.asarray(expected)


def _write_split(root: Path, split: str, coords, per_file_labels=None, entries_extra=None) -> list[dict]:
    (root / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, c in enumerate(coords):
        rel = f"{split}/{i:05d}.xyz"
        labels = None if per_file_labels is None else per_file_labels[i]
        write_xyz(root / rel, PointCloud(c), labels)
        entry = {"file": rel}
        entry.update(entries_extra[i])
        entries.append(entry)
    return entries


def synth_classification(
    out_dir,
    n_points: int = 256,
    n_per_class: int = 100,
    n_test_per_class: int = 20,
    seed: int = 0,
    shapes=CLASSIFICATION_SHAPES,
) -> DatasetManifest:
    """Write sphere/cube/torus surface samples and their manifest under ``out_dir``."""
    if n_points < 32:
        raise ValueError("n_points must be at least 32")
    root = Path(out_dir)
    train_x, train_y = make_classification_arrays(n_points, n_per_class, seed, shapes)
    test_x, test_y = make_classification_arrays(n_points, n_test_per_class, seed + 1_000_003, shapes)
    splits = {
        "train": _write_split(root, "train", train_x, entries_extra=[{"label": int(y)} for y in train_y]),
        "test": _write_split(root, "test", test_x, entries_extra=[{"label": int(y)} for y in test_y]),
    }
    manifest = DatasetManifest(root, "classification", list(shapes), splits, meta={"seed": seed, "n_points": n_points})
    manifest.save()
    return manifest


def synth_segmentation(
    out_dir,
    n_points: int = 512,
    n_instances: int = 200,
    n_test: int = 40,
    seed: int = 0,
) -> DatasetManifest:
    """Write sphere-with-handle samples (parts: body, handle) under ``out_dir``.

    The pooled handle-point count is checked against its expected binomial
    proportion with a chi-square test; the p-value is kept in ``meta``.
    """
    if n_points < 32:
        raise ValueError("n_points must be at least 32")
    root = Path(out_dir)
    train_x, train_y, train_p = make_segmentation_arrays(n_points, n_instances, seed)
    test_x, test_y, _ = make_segmentation_arrays(n_points, n_test, seed + 1_000_003)
    observed = np.array([(train_y == 0).sum(), (train_y == 1).sum()])
    exp_handle = float(train_p.sum() * n_points)
    expected = np.array([n_points * n_instances - exp_handle, exp_handle])
    pvalue = float(stats.chisquare(observed, expected).pvalue)
    if pvalue < 1e-3:
        logger.warning("part proportions look off (chi-square p=%.2g)", pvalue)
    cat = [{"category": "mug"}] * max(n_instances, n_test)
    splits = {
        "train": _write_split(root, "train", train_x, train_y, cat),
        "test": _write_split(root, "test", test_x, test_y, cat),
    }
    manifest = DatasetManifest(
        root,
        "segmentation",
        ["body", "handle"],
        splits,
        categories={"mug": [0, 1]},
        meta={"seed": seed, "n_points": n_points, "part_chisquare_p": pvalue},
    )
    manifest.save()
    return manifest
