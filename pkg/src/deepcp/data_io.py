"""Synthetic ground truth, observed/held-out splits, and tensor files.

Tensor table format (UTF-8, one record per line, '.' decimal separator)::

    shape: 50 16 5
    0 0 0 1.25
    0 0 1 -0.5
    ...

Indices are 0-based. Blank lines and lines starting with '#' are ignored.
Entries not listed default to 0 (and are counted as missing).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor_core import DenseTensor, SparseEntrySet, gather, outer_product

log = logging.getLogger(__name__)

DATASET_FORMAT = "deepcp-dataset/1"


class TensorFileError(ValueError):
    pass


@dataclass
class CompletionDataset:
    shape: tuple[int, ...]
    observed: SparseEntrySet
    heldout: SparseEntrySet
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if self.observed.shape != self.shape or self.heldout.shape != self.shape:
            raise ValueError("observed/held-out shapes differ from dataset shape")
        if len(self.observed) == 0:
            raise ValueError("observed set must be nonempty")
        overlap = np.intersect1d(self.observed.linear_indices, self.heldout.linear_indices)
        if overlap.size:
            first = np.unravel_index(overlap[0], self.shape)
            raise ValueError(f"observed and held-out sets overlap (e.g. at {tuple(map(int, first))})")

    @property
    def observed_fraction(self) -> float:
        return len(self.observed) / int(np.prod(self.shape))


def generate_synthetic(dims: Sequence[int], rank: int, seed: int) -> DenseTensor:
    """Sum of ``rank`` outer products with standard normal factors.

    The factors (list over modes of ``(rank, d_n)`` arrays) are kept in
    ``tensor.meta["factors"]``.
    """
    if rank < 1:
        raise ValueError("rank must be at least 1")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    factors = [rng.standard_normal((rank, d)) for d in dims]
    values = sum(outer_product([f[r] for f in factors]).values for r in range(rank))
    return DenseTensor(values, meta={"factors": factors, "rank": rank, "seed": seed})


def tensor_from_factors(factors: Sequence[np.ndarray]) -> DenseTensor:
    rank = factors[0].shape[0]
    return DenseTensor(sum(outer_product([f[r] for f in factors]).values for r in range(rank)))


def split_observed(tensor: DenseTensor, observed_fraction: float, seed: int) -> CompletionDataset:
    """Uniformly random partition into round(fraction * size) observed entries and the rest."""
    if not (0 < observed_fraction < 1):
        raise ValueError(f"observed_fraction must lie in (0, 1), got {observed_fraction}")
    size = tensor.values.size
    m = int(round(observed_fraction * size))
    if m == 0:
        raise ValueError(f"fraction {observed_fraction} leaves no observed entries in {size}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(size)
    obs_lin, held_lin = np.sort(perm[:m]), np.sort(perm[m:])

    def entries(lin):
        idx = np.array(np.unravel_index(lin, tensor.shape)).T.reshape(-1, tensor.order)
        return SparseEntrySet(tensor.shape, idx, gather(tensor, idx))

    prov = {"observed_fraction": observed_fraction, "split_seed": seed}
    prov.update({k: v for k, v in tensor.meta.items() if k != "factors"})
    if "factors" in tensor.meta:
        prov["factors"] = [f.tolist() for f in tensor.meta["factors"]]
    return CompletionDataset(tensor.shape, entries(obs_lin), entries(held_lin), prov)


def load_tensor_table(path, standardize: bool = False) -> DenseTensor:
    """Parse the tensor table format described in the module docstring.

    With ``standardize`` the listed entries are z-scored; mean and std are
    kept in ``meta``. ``meta["missing"]`` counts entries absent from the file.
    """
    path = Path(path)
    shape = None
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if shape is None:
                if not line.startswith("shape:"):
                    raise TensorFileError(f"{path}:{lineno}: expected 'shape: d1 ... dN' header")
                try:
                    shape = tuple(int(x) for x in line[len("shape:"):].split())
                except ValueError:
                    raise TensorFileError(f"{path}:{lineno}: malformed shape header") from None
                if not shape or any(d <= 0 for d in shape):
                    raise TensorFileError(f"{path}:{lineno}: shape must list positive sizes")
                continue
            parts = line.split()
            if len(parts) != len(shape) + 1:
                raise TensorFileError(f"{path}:{lineno}: expected {len(shape)} indices and a value")
            try:
                idx = tuple(int(x) for x in parts[:-1])
                value = float(parts[-1])
            except ValueError:
                raise TensorFileError(f"{path}:{lineno}: cannot parse '{line}'") from None
            if any(not (0 <= i < d) for i, d in zip(idx, shape)):
                raise TensorFileError(f"{path}:{lineno}: index {idx} out of range for shape {shape}")
            if not np.isfinite(value):
                raise TensorFileError(f"{path}:{lineno}: non-finite value")
            if idx in seen:
                raise TensorFileError(f"{path}:{lineno}: duplicate index {idx} (first at line {seen[idx][0]})")
            seen[idx] = (lineno, value)
    if shape is None:
        raise TensorFileError(f"{path}: missing shape header")
    values = np.zeros(shape)
    present = np.zeros(shape, dtype=bool)
    for idx, (_, value) in seen.items():
        values[idx] = value
        present[idx] = True
    meta = {"source": str(path), "missing": int(values.size - len(seen)), "standardized": standardize}
    if meta["missing"]:
        log.warning("%s: %d entries missing, filled with 0", path, meta["missing"])
    if standardize and seen:
        mean = float(values[present].mean())
        std = float(values[present].std())
        if std == 0:
            raise TensorFileError(f"{path}: cannot standardize constant data")
        values[present] = (values[present] - mean) / std
        meta.update(mean=mean, std=std)
    return DenseTensor(values, meta=meta)


def save_tensor_table(tensor: DenseTensor, path, mask: Optional[np.ndarray] = None) -> None:
    """Write every entry (or those where ``mask`` is true) at full precision."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("shape: " + " ".join(str(d) for d in tensor.shape) + "\n")
        for idx in np.ndindex(tensor.shape):
            if mask is None or mask[idx]:
                fh.write(" ".join(str(i) for i in idx) + " " + repr(float(tensor.values[idx])) + "\n")


def _entries_to_json(s: SparseEntrySet) -> dict:
    return {"indices": s.indices.tolist(), "values": [float(v) for v in s.values]}


def save_dataset(dataset: CompletionDataset, path) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "shape": list(dataset.shape),
        "observed": _entries_to_json(dataset.observed),
        "heldout": _entries_to_json(dataset.heldout),
        "provenance": dataset.provenance,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(doc), encoding="utf-8")
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> CompletionDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a dataset file ({exc})") from None
    if doc.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {doc.get('format')!r}")
    shape = tuple(doc["shape"])

    def entries(d):
        idx = np.array(d["indices"], dtype=np.int64).reshape(-1, len(shape))
        return SparseEntrySet(shape, idx, np.array(d["values"], dtype=np.float64))

    return CompletionDataset(shape, entries(doc["observed"]), entries(doc["heldout"]), doc.get("provenance", {}))


def true_factors(dataset: CompletionDataset) -> Optional[list[np.ndarray]]:
    f = dataset.provenance.get("factors")
    return None if f is None else [np.array(x) for x in f]
