"""Per-center survival datasets, covariate schemas and model signatures."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .errors import ParseError, SchemaError, ValidationError
from .hazard import BaselineFamily

RESERVED = ("time", "status")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = "continuous"
    levels: Tuple[str, ...] = ()
    reference: Optional[str] = None

    def __post_init__(self):
        if self.name in RESERVED:
            raise SchemaError(f"{self.name!r} is a reserved column name")
        if self.kind == "continuous":
            if self.levels or self.reference is not None:
                raise SchemaError(f"continuous covariate {self.name!r} takes no levels")
        elif self.kind == "categorical":
            levels = tuple(str(x) for x in self.levels)
            object.__setattr__(self, "levels", levels)
            if len(levels) < 2:
                raise SchemaError(f"categorical {self.name!r} needs at least 2 levels")
            if len(set(levels)) != len(levels):
                raise SchemaError(f"categorical {self.name!r} has duplicate levels")
            if self.reference is None or str(self.reference) not in levels:
                raise SchemaError(f"categorical {self.name!r} needs a reference among its levels")
            object.__setattr__(self, "reference", str(self.reference))
        else:
            raise SchemaError(f"unknown covariate kind {self.kind!r}")

    @property
    def dummy_levels(self) -> Tuple[str, ...]:
        return tuple(lv for lv in self.levels if lv != self.reference)

    @property
    def columns(self) -> List[str]:
        if self.kind == "continuous":
            return [self.name]
        return [f"{self.name}={lv}" for lv in self.dummy_levels]


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate declarations.

    Categorical covariates expand to one dummy column per non-reference
    level, in declared level order; levels never seen in the data still get
    their (all-zero) column.
    """

    entries: Tuple[Covariate, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate covariate names in schema")

    @classmethod
    def continuous(cls, names: Iterable[str]) -> "CovariateSchema":
        return cls(tuple(Covariate(n) for n in names))

    @classmethod
    def from_dict(cls, spec: dict) -> "CovariateSchema":
        try:
            items = spec["covariates"]
        except (KeyError, TypeError):
            raise SchemaError("schema needs a top-level 'covariates' list") from None
        entries = []
        for item in items or ():
            if not isinstance(item, dict) or "name" not in item:
                raise SchemaError(f"bad schema entry: {item!r}")
            entries.append(
                Covariate(
                    name=str(item["name"]),
                    kind=item.get("kind", "continuous"),
                    levels=tuple(item.get("levels", ())),
                    reference=item.get("reference"),
                )
            )
        return cls(tuple(entries))

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def columns(self) -> List[str]:
        return [c for e in self.entries for c in e.columns]

    def encode_row(self, values: Dict[str, str], line: Optional[int] = None) -> List[float]:
        out: List[float] = []
        for e in self.entries:
            raw = values[e.name].strip()
            if e.kind == "continuous":
                try:
                    x = float(raw)
                except ValueError:
                    raise ParseError(f"{e.name}: cannot parse {raw!r} as a number", line) from None
                if not np.isfinite(x):
                    raise ValidationError(f"line {line}: {e.name} is not finite")
                out.append(x)
            else:
                if raw not in e.levels:
                    msg = f"{e.name}: unknown level {raw!r} (declared {list(e.levels)})"
                    if line is not None:
                        msg = f"line {line}: {msg}"
                    raise SchemaError(msg)
                out.extend(1.0 if raw == lv else 0.0 for lv in e.dummy_levels)
        return out

    def decode_row(self, row: Sequence[float]) -> Dict[str, Union[float, str]]:
        """Inverse of :meth:`encode_row` for one encoded covariate vector."""
        out: Dict[str, Union[float, str]] = {}
        pos = 0
        for e in self.entries:
            if e.kind == "continuous":
                out[e.name] = float(row[pos])
                pos += 1
                continue
            block = list(row[pos : pos + len(e.dummy_levels)])
            pos += len(e.dummy_levels)
            hits = [lv for lv, x in zip(e.dummy_levels, block) if x == 1.0]
            out[e.name] = hits[0] if hits else e.reference
        return out


def load_schema(path) -> CovariateSchema:
    """Read a YAML schema file (see README for the format)."""
    with open(path, encoding="utf-8") as fh:
        try:
            spec = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    return CovariateSchema.from_dict(spec)


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Immutable per-center records ``(t_i, delta_i, z_i)``."""

    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    column_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        status = np.array(self.status, dtype=float).reshape(-1)
        n = times.shape[0]
        Z = np.array(self.covariates, dtype=float)
        if Z.size == 0 and Z.ndim != 2:
            Z = Z.reshape(n, len(self.column_names))
        if Z.ndim != 2:
            raise ValidationError("covariates must be a 2-d matrix")
        names = tuple(self.column_names) or tuple(f"z{j + 1}" for j in range(Z.shape[1]))
        if status.shape[0] != n or Z.shape[0] != n:
            raise ValidationError(
                f"length mismatch: {n} times, {status.shape[0]} statuses, {Z.shape[0]} covariate rows"
            )
        if Z.shape[1] != len(names):
            raise ValidationError(f"{Z.shape[1]} covariate columns but {len(names)} names")
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            bad = int(np.flatnonzero(~(times > 0) | ~np.isfinite(times))[0])
            raise ValidationError(f"record {bad}: follow-up time must be finite and > 0")
        if not np.all((status == 0) | (status == 1)):
            raise ValidationError("status values must be 0 or 1")
        if not np.all(np.isfinite(Z)):
            raise ValidationError("covariate matrix has non-finite entries")
        for arr in (times, status, Z):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "covariates", Z)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def events(self) -> int:
        return int(self.status.sum())

    def take(self, index) -> "SurvivalDataset":
        index = np.asarray(index)
        return SurvivalDataset(
            self.times[index], self.status[index], self.covariates[index], self.column_names
        )

    @classmethod
    def concat(cls, datasets: Sequence["SurvivalDataset"]) -> "SurvivalDataset":
        if not datasets:
            raise ValidationError("nothing to concatenate")
        names = datasets[0].column_names
        if any(d.column_names != names for d in datasets):
            raise ValidationError("datasets have different covariate columns")
        return cls(
            np.concatenate([d.times for d in datasets]),
            np.concatenate([d.status for d in datasets]),
            np.vstack([d.covariates for d in datasets]),
            names,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "status", *self.column_names])
            for t, d, z in zip(self.times, self.status, self.covariates):
                w.writerow([repr(float(t)), int(d), *(repr(float(x)) for x in z)])


def load_dataset(path, schema: CovariateSchema, center: bool = False) -> SurvivalDataset:
    """Read a ``time,status,<covariates...>`` CSV and dummy-encode it.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : CovariateSchema
        Declares every covariate column; the header must contain exactly the
        schema names plus ``time`` and ``status``.
    center : bool
        Subtract the column means of continuous covariates. Off by default:
        centering constants differ between centers.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        expected = set(RESERVED) | set(schema.names)
        if set(header) != expected or len(header) != len(expected):
            missing = sorted(expected - set(header))
            extra = sorted(set(header) - expected)
            raise SchemaError(f"{path}: header mismatch (missing {missing}, unexpected {extra})")
        times, status, rows = [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            values = dict(zip(header, rec))
            try:
                t = float(values["time"])
            except ValueError:
                raise ParseError(f"cannot parse time {values['time']!r}", line) from None
            if not (t > 0 and np.isfinite(t)):
                raise ValidationError(f"line {line}: time must be > 0, got {values['time']!r}")
            s = values["status"].strip()
            if s not in ("0", "1"):
                raise ParseError(f"status must be 0 or 1, got {s!r}", line)
            times.append(t)
            status.append(int(s))
            rows.append(schema.encode_row(values, line))
    Z = np.array(rows, dtype=float).reshape(len(rows), len(schema.columns))
    if center and Z.shape[0]:
        cols = []
        pos = 0
        for e in schema.entries:
            if e.kind == "continuous":
                cols.append(pos)
            pos += len(e.columns)
        Z[:, cols] -= Z[:, cols].mean(axis=0)
    return SurvivalDataset(np.array(times), np.array(status), Z, tuple(schema.columns))


@dataclass(frozen=True)
class ModelSignature:
    """Identity of a fitted model: covariate columns plus baseline family.

    Two centers can be aggregated only if their signatures are equal.
    """

    columns: Tuple[str, ...]
    family: BaselineFamily

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def canonical(self) -> str:
        body = {"columns": list(self.columns), **self.family.describe()}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), **self.family.describe()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSignature":
        return cls(tuple(d["columns"]), BaselineFamily.from_descriptor(d))


def signature(source, family: BaselineFamily) -> ModelSignature:
    """Signature of a dataset, schema or explicit column list under ``family``."""
    if isinstance(source, SurvivalDataset):
        cols = source.column_names
    elif isinstance(source, CovariateSchema):
        cols = tuple(source.columns)
    else:
        cols = tuple(source)
    return ModelSignature(tuple(cols), family)
