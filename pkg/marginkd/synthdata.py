"""Seeded multi-view Gaussian data: each class is a mixture of view sub-clusters."""
import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import ContractError, GenerationError

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 1000
SEED_MASK = 2 ** 64 - 1


def derive_seed(*keys: Union[int, str]) -> int:
    """Stable 63-bit seed for a named sub-stream, e.g. derive_seed(seed, "epoch", 3)."""
    # negative ints wrap to their two's-complement 64-bit value so k and -k stay distinct
    entropy = [k & SEED_MASK if isinstance(k, int) else int.from_bytes(k.encode("utf-8"), "little") for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(eq=False)
class Sample:
    x: np.ndarray
    y: int
    view_id: int


@dataclass(eq=False)
class Dataset:
    samples: List[Sample]
    c: int
    views_per_class: int
    seed: Optional[int]  # None when loaded from a file of unknown origin
    class_centers: Optional[np.ndarray] = None
    view_centers: Optional[np.ndarray] = None  # (c, views_per_class, d_in)
    source_sha256: Optional[str] = None
    _X: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.y < self.c:
                raise ContractError(f"label {s.y} outside 0..{self.c - 1}")
            if not 0 <= s.view_id < self.views_per_class:
                raise ContractError(f"view_id {s.view_id} outside 0..{self.views_per_class - 1}")
        missing = set(range(self.c)) - {s.y for s in self.samples}
        if missing:
            raise ContractError(f"classes without samples: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_in(self) -> int:
        return int(self.samples[0].x.shape[0])

    @property
    def X(self) -> np.ndarray:
        if self._X is None:
            self._X = np.stack([s.x for s in self.samples])
        return self._X

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.int64)

    def class_of(self, y: int) -> np.ndarray:
        """Indices of every sample labelled `y`, i.e. C(x) for any x of that class."""
        return np.flatnonzero(self.y == y)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.c, self.views_per_class, self.seed,
                       self.class_centers, self.view_centers, self.source_sha256)

    def split(self, holdout_frac: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Stratified train/held-out split; every class keeps at least one sample on each side."""
        if not 0 < holdout_frac < 1:
            raise ContractError(f"holdout_frac must lie in (0, 1), got {holdout_frac}")
        rng = np.random.default_rng(seed)
        train_idx, held_idx = [], []
        for k in range(self.c):
            idx = rng.permutation(self.class_of(k))
            if len(idx) < 2:
                raise ContractError(f"class {k} has {len(idx)} sample(s); cannot split")
            n_held = min(max(1, int(round(holdout_frac * len(idx)))), len(idx) - 1)
            held_idx.extend(idx[:n_held].tolist())
            train_idx.extend(idx[n_held:].tolist())
        return self.subset(sorted(train_idx)), self.subset(sorted(held_idx))

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["y", "view_id"] + [f"x{j}" for j in range(self.d_in)])
            for s in self.samples:
                writer.writerow([s.y, s.view_id] + [format(v, ".17g") for v in s.x])
        logger.info(f"Wrote {len(self)} samples to {path}")

    @classmethod
    def from_csv(cls, path: Path, seed: Optional[int] = None) -> "Dataset":
        """Load a dataset written by `to_csv`.

        The file carries no generator seed, so `seed` stays None unless the
        caller knows it. The sha256 of the file is kept as `source_sha256`.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found at: {path}")
        samples = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header[:2] != ["y", "view_id"]:
                raise ContractError(f"unexpected dataset header in {path}: {header[:3]}")
            for row in reader:
                samples.append(Sample(np.array([float(v) for v in row[2:]]), int(row[0]), int(row[1])))
        if not samples:
            raise ContractError(f"dataset {path} has no rows")
        c = max(s.y for s in samples) + 1
        views = max(s.view_id for s in samples) + 1
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        logger.info(f"Loaded {len(samples)} samples ({c} classes) from {path}")
        return cls(samples, c, views, seed, source_sha256=digest)


class GeneratorConfig(BaseModel):
    """Generator parameters; defaults give the 4-class, 3-view, 150-per-class set."""

    c: int = Field(4, ge=2)
    views_per_class: int = Field(3, ge=1)
    per_view: int = Field(50, ge=1)
    d_in: int = Field(8, ge=1)
    class_sep: float = 4.0
    view_sep: float = 1.5
    noise: float = 0.3
    seed: int = 0

    @model_validator(mode="after")
    def _ordered_separations(self):
        if not self.class_sep > self.view_sep > self.noise > 0:
            raise ValueError(f"need class_sep > view_sep > noise > 0, got {self.class_sep}, {self.view_sep}, {self.noise}")
        return self


def _place(rng: np.random.Generator, count: int, d: int, min_sep: float, spread: float,
           center: bool) -> Optional[np.ndarray]:
    """Random points with pairwise distance >= min_sep, or None after too many tries."""
    for _ in range(MAX_PLACEMENT_TRIES):
        pts = rng.standard_normal((count, d)) * spread
        if center:
            pts -= pts.mean(axis=0)
        if count == 1:
            return pts
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if dist[np.triu_indices(count, 1)].min() >= min_sep:
            return pts
    return None


def generate_multiview(c: int, views_per_class: int, per_view: int, d_in: int, class_sep: float,
                       view_sep: float, noise: float, seed: int) -> Dataset:
    """Gaussian blobs: c class centers, views_per_class view centers around each.

    Each class center is the mean of its view centers. Samples are ordered
    class-major, then view, then draw.
    """
    if min(c, views_per_class, per_view, d_in) < 1:
        raise ContractError("all counts must be >= 1")
    if not class_sep > view_sep > noise > 0:
        raise ContractError(f"need class_sep > view_sep > noise > 0, got {class_sep}, {view_sep}, {noise}")
    rng = np.random.default_rng(seed)

    # spreads chosen so typical pairwise distances sit at ~2x / ~1.5x the minimum
    centers = _place(rng, c, d_in, class_sep, 2.0 * class_sep / np.sqrt(2 * d_in), center=False)
    if centers is None:
        raise GenerationError(f"could not place {c} class centers {class_sep} apart in {d_in} dimensions")
    views = np.empty((c, views_per_class, d_in))
    for k in range(c):
        offsets = _place(rng, views_per_class, d_in, view_sep, 1.5 * view_sep / np.sqrt(2 * d_in), center=True)
        if offsets is None:
            raise GenerationError(f"could not place {views_per_class} views {view_sep} apart in {d_in} dimensions")
        views[k] = centers[k] + offsets

    samples = []
    for k in range(c):
        for v in range(views_per_class):
            draws = views[k, v] + noise * rng.standard_normal((per_view, d_in))
            samples.extend(Sample(row, k, v) for row in draws)
    logger.debug(f"Generated {len(samples)} samples: c={c}, views={views_per_class}, d_in={d_in}, seed={seed}")
    return Dataset(samples, c, views_per_class, seed, class_centers=views.mean(axis=1), view_centers=views)


def generate_from_config(cfg: GeneratorConfig) -> Dataset:
    return generate_multiview(cfg.c, cfg.views_per_class, cfg.per_view, cfg.d_in, cfg.class_sep,
                              cfg.view_sep, cfg.noise, cfg.seed)


def augment(x: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """x + strength * g with g a seeded standard normal vector."""
    if strength < 0:
        raise ContractError(f"augment strength must be >= 0, got {strength}")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    return x + strength * np.random.default_rng(seed).standard_normal(x.shape)


def batch_iter(ds: Union[Dataset, int], batch_size: int, epoch_seed: int) -> List[np.ndarray]:
    """Seeded permutation of all indices cut into consecutive batches."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = ds if isinstance(ds, int) else len(ds)
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def class_counts(ds: Dataset) -> Dict[int, int]:
    counts = np.bincount(ds.y, minlength=ds.c)
    return {k: int(v) for k, v in enumerate(counts)}
