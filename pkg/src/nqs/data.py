"""Scaling-run records and their CSV on-disk format.

A record is one training run: (n_params, batch, steps, seq_len) plus the
observed loss and free-form tags. CSV files carry exactly those columns
(tags semicolon-separated); unknown columns are preserved round-trip as
per-record extras.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .params import RunConfig

__all__ = ["DatasetFormatError", "ScalingDataset", "ScalingRecord", "load_dataset"]

REQUIRED_COLUMNS = ("n_params", "batch", "steps", "seq_len", "loss")


class DatasetFormatError(ValueError):
    """A dataset file does not match the expected CSV schema."""


def _parse_int(text: str, column: str, row: int) -> int:
    try:
        val = float(text)
        if val != int(val):
            raise ValueError
        return int(val)
    except ValueError:
        raise DatasetFormatError(
            f"row {row}: column '{column}' must be an integer, got {text!r}"
        ) from None


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetFormatError(
            f"row {row}: column '{column}' must be a number, got {text!r}"
        ) from None


def _parse_loss(text: str, column: str, row: int) -> float:
    val = _parse_float(text, column, row)
    if not val > 0.0:
        raise DatasetFormatError(
            f"row {row}: column '{column}' must be positive, got {text!r}"
        )
    return val


@dataclass(frozen=True)
class ScalingRecord:
    """One observed training run."""

    n_params: int
    batch: int
    steps: int
    seq_len: int
    loss: float
    tags: frozenset = frozenset()
    extras: Tuple[Tuple[str, str], ...] = ()

    @property
    def run(self) -> RunConfig:
        return RunConfig(self.n_params, self.batch, self.steps, self.seq_len)

    @property
    def tokens(self) -> int:
        return self.batch * self.steps * self.seq_len

    @property
    def compute(self) -> float:
        return 6.0 * self.n_params * self.tokens

    def has_tag(self, tag: str) -> bool:
        return tag in self.tags


@dataclass(frozen=True)
class ScalingDataset:
    """An ordered collection of scaling records."""

    records: Tuple[ScalingRecord, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ScalingRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return ScalingDataset(self.records[idx], dict(self.meta))
        return self.records[idx]

    def __add__(self, other: "ScalingDataset") -> "ScalingDataset":
        meta = {**self.meta, **other.meta}
        return ScalingDataset(self.records + other.records, meta)

    def with_tag(self, tag: str) -> "ScalingDataset":
        return ScalingDataset(tuple(r for r in self.records if r.has_tag(tag)), dict(self.meta))

    def without_tag(self, tag: str) -> "ScalingDataset":
        return ScalingDataset(
            tuple(r for r in self.records if not r.has_tag(tag)), dict(self.meta)
        )

    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    # -- CSV ------------------------------------------------------------

    def extra_columns(self) -> List[str]:
        """Union of extra column names, in first-seen order."""
        seen: Dict[str, None] = {}
        for rec in self.records:
            for key, _ in rec.extras:
                seen.setdefault(key, None)
        return list(seen)

    def save_csv(self, path: str) -> None:
        extra_cols = self.extra_columns()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(REQUIRED_COLUMNS) + ["tags"] + extra_cols)
            for rec in self.records:
                extras = dict(rec.extras)
                writer.writerow(
                    [
                        rec.n_params,
                        rec.batch,
                        rec.steps,
                        rec.seq_len,
                        repr(rec.loss),
                        ";".join(sorted(rec.tags)),
                    ]
                    + [extras.get(col, "") for col in extra_cols]
                )


def load_dataset(path: str) -> ScalingDataset:
    """Read a scaling-run CSV, validating schema and dtypes."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetFormatError("dataset file is empty (no header row)")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DatasetFormatError(f"dataset is missing required column '{missing[0]}'")
        extra_cols = [c for c in reader.fieldnames if c not in REQUIRED_COLUMNS and c != "tags"]
        records = []
        for i, row in enumerate(reader, start=2):
            tags = frozenset(t for t in (row.get("tags") or "").split(";") if t)
            records.append(
                ScalingRecord(
                    n_params=_parse_int(row["n_params"], "n_params", i),
                    batch=_parse_int(row["batch"], "batch", i),
                    steps=_parse_int(row["steps"], "steps", i),
                    seq_len=_parse_int(row["seq_len"], "seq_len", i),
                    loss=_parse_loss(row["loss"], "loss", i),
                    tags=tags,
                    extras=tuple((c, row[c]) for c in extra_cols),
                )
            )
    return ScalingDataset(tuple(records))
