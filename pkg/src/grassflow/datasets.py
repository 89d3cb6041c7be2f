"""Data on Grassmann manifolds: toy textures on Gr(1, 3) and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RankDeficientError, gram_schmidt

TEXTURES = ("2spirals", "swissroll", "2circles", "2sines", "target")
DATASET_NAMES = TEXTURES + ("csv",)


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class DatasetSpec:
    name: str
    n: int = 1000
    seed: int = 0
    path: str | None = None
    dims: tuple[int, int] = (3, 1)
    header: bool | None = None

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; valid names: {', '.join(DATASET_NAMES)}")
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.name == "csv" and not self.path:
            raise ValueError("csv dataset needs a path")
        self.dims = tuple(int(d) for d in self.dims)


@dataclass
class SampleBatch:
    points: np.ndarray  # (N, D, k)
    dims: tuple[int, int]
    rows: np.ndarray | None = field(default=None)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, index) -> "SampleBatch":
        rows = None if self.rows is None else self.rows[index]
        return SampleBatch(self.points[index], self.dims, rows)


# --------------------------------------------------------------------------
# textures
# --------------------------------------------------------------------------


def planar_texture(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """2-D samples of one of the toy textures, shape (n, 2)."""
    if name == "2spirals":
        half = (n + 1) // 2
        r = np.sqrt(rng.random((half, 1))) * 540 * (2 * np.pi) / 360
        d1x = -np.cos(r) * r + rng.random((half, 1)) * 0.1
        d1y = np.sin(r) * r + rng.random((half, 1)) * 0.1
        x = np.vstack((np.hstack((d1x, d1y)), np.hstack((-d1x, -d1y)))) / 3
        return (x + rng.standard_normal(x.shape) * 0.1)[:n]
    if name == "swissroll":
        from sklearn.datasets import make_swiss_roll

        data = make_swiss_roll(n_samples=n, noise=0.3, random_state=_sk_seed(rng))[0]
        return data[:, [0, 2]] / 5
    if name == "2circles":
        from sklearn.datasets import make_circles

        data = make_circles(n_samples=n, factor=0.5, noise=0.05, random_state=_sk_seed(rng))[0]
        return data * 3
    if name == "2sines":
        x = (rng.random(n) - 0.5) * 2 * np.pi
        u = (rng.binomial(1, 0.5, n) - 0.5) * 2
        y = u * np.sin(x) * 2.5
        x = x + rng.standard_normal(n) * 0.1
        y = y + rng.standard_normal(n) * 0.1
        return np.stack((x, y), 1)
    if name == "target":
        shapes = rng.integers(7, size=n)
        mask = [(shapes == i) * 1.0 for i in range(7)]
        theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
        x = (
            (mask[0] + mask[1] + mask[2]) * (rng.random(n) - 0.5) * 4
            + (-mask[3] + mask[5]) * 2
            + mask[6] * np.cos(theta)
        )
        y = (
            (mask[3] + mask[4] + mask[5]) * (rng.random(n) - 0.5) * 4
            + (-mask[0] + mask[2]) * 2
            + mask[6] * np.sin(theta)
        )
        x = x + rng.standard_normal(n) * 0.1
        y = y + rng.standard_normal(n) * 0.1
        return np.stack((x, y), 1)
    raise ValueError(f"unknown texture {name!r}; valid names: {', '.join(TEXTURES)}")


def _sk_seed(rng):
    return int(rng.integers(2**31 - 1))


def lift_to_sphere(sample_2d: np.ndarray) -> np.ndarray:
    """Scale the batch into the unit disc, prepend 1 and normalize: (n, 3)."""
    norm = sample_2d / np.max(np.linalg.norm(sample_2d, axis=1))
    s3 = np.concatenate((np.ones((sample_2d.shape[0], 1)), norm), axis=1)
    return s3 / np.linalg.norm(s3, axis=1)[:, None]


def texture_points(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Gr(1, 3) representatives, shape (n, 3, 1)."""
    return lift_to_sphere(planar_texture(name, n, rng))[:, :, None]


def generate_texture(spec: DatasetSpec) -> SampleBatch:
    if spec.name not in TEXTURES:
        raise ValueError(f"unknown texture {spec.name!r}; valid names: {', '.join(TEXTURES)}")
    if spec.dims != (3, 1):
        raise ValueError("textures live on Gr(1, 3); dims must be (3, 1)")
    rng = np.random.default_rng(spec.seed)
    return SampleBatch(texture_points(spec.name, spec.n, rng), (3, 1), np.arange(spec.n))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def _parse_row(cells, width, lineno, path):
    if len(cells) != width:
        raise DataError(f"{path}:{lineno}: expected {width} values, found {len(cells)}")
    try:
        vals = np.array([float(c) for c in cells])
    except ValueError:
        raise DataError(f"{path}:{lineno}: could not parse a number") from None
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}:{lineno}: non-finite value")
    return vals


def _looks_numeric(cells):
    try:
        [float(c) for c in cells]
    except ValueError:
        return False
    return True


def load_csv(path, D: int, k: int, header: bool | None = None) -> SampleBatch:
    """Read one D x k matrix per line (row-major) and orthonormalize it.

    ``header=None`` skips the first line only when it is not numeric.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    mats, rows = [], []
    with path.open(newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in cells]
            if not cells or all(c == "" for c in cells):
                continue
            if lineno == 1 and (header or (header is None and not _looks_numeric(cells))):
                continue
            vals = _parse_row(cells, D * k, lineno, path)
            try:
                mats.append(gram_schmidt(vals.reshape(D, k)))
            except RankDeficientError as exc:
                raise RankDeficientError(f"{path}:{lineno}: {exc}") from None
            rows.append(lineno)
    points = np.array(mats, dtype=np.float64).reshape(-1, D, k)
    return SampleBatch(points, (D, k), np.array(rows, dtype=int))


def write_csv(path, points: np.ndarray, header: bool = True) -> None:
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    D, k = points.shape[1:] if points.ndim == 3 else (0, 0)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"y{i}_{j}" for i in range(D) for j in range(k)])
        for i in range(n):
            w.writerow([repr(float(x)) for x in points[i].ravel()])


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def split(batch: SampleBatch, fractions, seed: int):
    """Deterministic shuffle, then cut into train / validation / test.

    ``fractions`` holds three non-negative numbers that sum to one, or three
    integer counts that sum to the batch size.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) < 0:
        raise ValueError("need three non-negative fractions")
    n = len(batch)
    if all(float(f).is_integer() for f in fr) and sum(fr) == n and n != 1:
        counts = [int(f) for f in fr]
    else:
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")
        n_val = int(round(fr[1] * n))
        n_test = int(round(fr[2] * n))
        counts = [n - n_val - n_test, n_val, n_test]
    for name, c, f in zip(("train", "validation", "test"), counts, fr):
        if f > 0 and c == 0:
            raise ValueError(f"{name} split is empty")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return batch.subset(perm[:a]), batch.subset(perm[a:b]), batch.subset(perm[b:])
