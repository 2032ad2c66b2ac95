"""Core data types, dataset validation, CSV loading and seed derivation."""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

MASK64 = (1 << 64) - 1


class OutcomeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class TreatmentArm(enum.IntEnum):
    CONTROL = 0
    TREATED = 1


class SiteRole(str, enum.Enum):
    TARGET = "target"
    SOURCE = "source"


class DatasetError(ValueError):
    """Raised for malformed site data (bad CSV, missing target, ...)."""


@dataclass(frozen=True, eq=False)
class SiteDataset:
    """One site's private patient table.

    ``covariates`` is ``(n, p)``; ``treatment`` and ``outcome`` have length n.
    Arrays are stored read-only so instances can be shared freely.
    """

    site_id: str
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.array(self.treatment, dtype=float).ravel()
        Y = np.array(self.outcome, dtype=float).ravel()
        for arr in (X, A, Y):
            arr.setflags(write=False)
        object.__setattr__(self, "site_id", str(self.site_id))
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", A)
        object.__setattr__(self, "outcome", Y)
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def arm_mask(self, arm: TreatmentArm | int) -> np.ndarray:
        return self.treatment == int(arm)

    def subset(self, rows) -> "SiteDataset":
        rows = np.asarray(rows)
        return SiteDataset(self.site_id, self.covariates[rows], self.treatment[rows],
                           self.outcome[rows], self.outcome_kind)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replication_index: int = 0
    stream_label: str = ""


def validate_dataset(ds: SiteDataset) -> list[str]:
    """Return every invariant violation found in ``ds`` (empty list = valid)."""
    problems: list[str] = []
    X, A, Y = ds.covariates, ds.treatment, ds.outcome
    n = X.shape[0]
    if n < 1:
        problems.append("empty dataset")
    if A.shape[0] != n or Y.shape[0] != n:
        problems.append(f"length mismatch: covariates {n}, treatment {A.shape[0]}, outcome {Y.shape[0]}")
        return problems
    for r, c in np.argwhere(~np.isfinite(X)):
        problems.append(f"non-finite entry at ({r},{c})")
    for r in np.flatnonzero(~np.isfinite(A)):
        problems.append(f"non-finite treatment at row {r}")
    for r in np.flatnonzero(~np.isfinite(Y)):
        problems.append(f"non-finite outcome at row {r}")
    finite_a = A[np.isfinite(A)]
    bad_a = np.flatnonzero(np.isfinite(A) & (A != 0) & (A != 1))
    for r in bad_a:
        problems.append(f"treatment not in {{0,1}} at row {r}")
    if ds.outcome_kind is OutcomeKind.BINARY:
        for r in np.flatnonzero(np.isfinite(Y) & (Y != 0) & (Y != 1)):
            problems.append(f"binary outcome not in {{0,1}} at row {r}")
    if n >= 1:
        if not np.any(finite_a == 1):
            problems.append("no treated units")
        if not np.any(finite_a == 0):
            problems.append("no control units")
    return problems


def covariate_means(ds: SiteDataset) -> np.ndarray:
    if ds.n == 0:
        raise DatasetError("cannot take covariate means of an empty dataset")
    return ds.covariates.mean(axis=0)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(spec: SeedSpec) -> int:
    """Deterministic 64-bit child seed from (master, replication, label)."""
    label = int.from_bytes(hashlib.blake2b(spec.stream_label.encode(), digest_size=8).digest(), "little")
    h = _splitmix64(spec.master_seed & MASK64)
    h = _splitmix64(h ^ (spec.replication_index & MASK64))
    h = _splitmix64(h ^ label)
    return h


def rng_for(master_seed: int, replication_index: int = 0, label: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(SeedSpec(master_seed, replication_index, label)))


# --------------------------------------------------------------------------
# CSV loader: header site_id,a,y,x1,...,xp
# --------------------------------------------------------------------------

def load_sites_csv(path: str | Path, outcome_kind: OutcomeKind | str = OutcomeKind.CONTINUOUS
                   ) -> list[SiteDataset]:
    """Group rows of a ``site_id,a,y,x1..xp`` CSV into datasets, in file order."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:3] != ["site_id", "a", "y"] or len(header) < 4:
            raise DatasetError(f"{path}: header must be site_id,a,y,x1,...,xp; got {','.join(header)}")
        xcols = header[3:]
        for j, name in enumerate(xcols, start=1):
            if name != f"x{j}":
                raise DatasetError(f"{path}: column {j + 3} should be x{j}, got {name!r}")
        groups: dict[str, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault(row[0].strip(), []).append(values)
    if not groups:
        raise DatasetError(f"{path}: no data rows")
    out = []
    for sid, rows in groups.items():
        arr = np.array(rows, dtype=float)
        out.append(SiteDataset(sid, arr[:, 2:], arr[:, 0], arr[:, 1], outcome_kind))
    return out


def write_sites_csv(path: str | Path, datasets: Iterable[SiteDataset]) -> None:
    datasets = list(datasets)
    p = datasets[0].p
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "a", "y"] + [f"x{j}" for j in range(1, p + 1)])
        for ds in datasets:
            for i in range(ds.n):
                w.writerow([ds.site_id, int(ds.treatment[i]), repr(float(ds.outcome[i]))]
                           + [repr(float(v)) for v in ds.covariates[i]])
