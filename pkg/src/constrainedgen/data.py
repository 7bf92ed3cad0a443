"""Dataset ingestion, schema handling, normalization and the eSIRS simulator.

Model-space layout: real and integer columns occupy one slot each,
categorical columns expand to one-hot blocks, and series columns occupy
``length`` consecutive slots. A table with series columns S and I of
length H therefore flattens to 2H dimensions ordered S(0..H-1), I(0..H-1).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "real" | "integer" | "categorical" | "series"
    vocabulary: tuple = ()
    length: int = 0

    def __post_init__(self):
        if self.kind not in ("real", "integer", "categorical", "series"):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical" and not self.vocabulary:
            raise ValueError(f"categorical column {self.name!r} needs a vocabulary")
        if self.kind == "series" and self.length < 1:
            raise ValueError(f"series column {self.name!r} needs a positive length")

    @property
    def width(self):
        if self.kind == "categorical":
            return len(self.vocabulary)
        if self.kind == "series":
            return self.length
        return 1


class TableSchema:
    """Ordered columns plus the name -> model-space slot mapping."""

    def __init__(self, columns):
        self.columns = list(columns)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        self._by_name = {c.name: c for c in self.columns}
        self._offsets = {}
        off = 0
        for c in self.columns:
            self._offsets[c.name] = off
            off += c.width
        self.width = off

    def column(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown column {name!r}") from None

    def offset(self, name):
        self.column(name)
        return self._offsets[name]

    def numeric_slot(self, name):
        col = self.column(name)
        if col.kind not in ("real", "integer"):
            raise ValueError(f"column {name!r} is not numeric")
        return self._offsets[name]

    def series_slot(self, name, index):
        col = self.column(name)
        if col.kind != "series":
            raise ValueError(f"column {name!r} is not a series")
        if not 0 <= index < col.length:
            raise IndexError(f"{name}[{index}] out of bounds (length {col.length})")
        return self._offsets[name] + index

    def onehot_slot(self, name, category):
        col = self.column(name)
        if col.kind != "categorical":
            raise ValueError(f"column {name!r} is not categorical")
        try:
            j = col.vocabulary.index(category)
        except ValueError:
            raise KeyError(f"unknown category {category!r} for column {name!r}") from None
        return self._offsets[name] + j

    def onehot_mask(self):
        """Boolean mask of model-space slots that belong to one-hot blocks."""
        mask = np.zeros(self.width, dtype=bool)
        for c in self.columns:
            if c.kind == "categorical":
                off = self._offsets[c.name]
                mask[off : off + c.width] = True
        return mask

    def slot_names(self):
        out = []
        for c in self.columns:
            if c.kind == "categorical":
                out.extend(f"{c.name}:{v}" for v in c.vocabulary)
            elif c.kind == "series":
                out.extend(f"{c.name}[{t}]" for t in range(c.length))
            else:
                out.append(c.name)
        return out

    def to_dict(self):
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, "vocabulary": list(c.vocabulary), "length": c.length}
                for c in self.columns
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Column(c["name"], c["kind"], tuple(c.get("vocabulary", ())), c.get("length", 0))
            for c in d["columns"]
        )


@dataclass
class Dataset:
    schema: TableSchema
    data: dict  # column name -> np.ndarray (numeric/series) or list[str] (categorical)
    rejected_rows: int = 0

    @property
    def n_rows(self):
        first = self.schema.columns[0].name
        return len(self.data[first])


class Normalization:
    """Per-slot z-score transform; one-hot slots are left untouched."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(std, dtype=np.float64), STD_FLOOR)

    @classmethod
    def fit(cls, raw_matrix, schema):
        mean = raw_matrix.mean(axis=0)
        std = raw_matrix.std(axis=0)
        onehot = schema.onehot_mask()
        mean[onehot] = 0.0
        std[onehot] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, width):
        return cls(np.zeros(width), np.ones(width))

    def apply(self, raw):
        return (raw - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


def normalize_name(raw):
    """CSV headers like "fixed acidity" become identifiers: fixed_acidity."""
    out = "".join(ch if ch.isalnum() else "_" for ch in raw.strip())
    if not out or out[0].isdigit():
        out = "_" + out
    return out


def _looks_integer(values, max_support=64):
    vals = np.asarray(values)
    if not np.all(np.isfinite(vals)):
        return False
    if not np.all(vals == np.round(vals)):
        return False
    return len(np.unique(vals)) <= max_support


def infer_schema(header, rows, drop=()):
    columns = []
    for j, raw_name in enumerate(header):
        name = normalize_name(raw_name)
        if name in drop or raw_name in drop:
            continue
        cells = [r[j] for r in rows]
        numeric = []
        all_numeric = True
        for c in cells:
            try:
                numeric.append(float(c))
            except ValueError:
                all_numeric = False
                break
        if not all_numeric:
            vocab = tuple(sorted(set(c.strip() for c in cells)))
            columns.append(Column(name, "categorical", vocabulary=vocab))
        elif _looks_integer(numeric):
            columns.append(Column(name, "integer"))
        else:
            columns.append(Column(name, "real"))
    return TableSchema(columns)


def ingest_csv(path, schema=None, drop=(), delimiter=None):
    """Load a CSV with a header row; malformed rows are dropped and counted."""
    with open(path, newline="", encoding="utf-8") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        if delimiter is None:
            delimiter = ";" if sample.count(";") > sample.count(",") else ","
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    ncols = len(header)
    good = [r for r in rows if len(r) == ncols]
    rejected = len(rows) - len(good)
    if not good:
        raise ValueError(f"{path}: column count mismatch on every row")

    if schema is None:
        schema = infer_schema(header, good, drop=drop)
    norm_header = [normalize_name(h) for h in header]
    col_index = {}
    for c in schema.columns:
        if c.kind == "series":
            for t in range(c.length):
                key = f"{c.name}[{t}]"
                norm_key = normalize_name(key)
                if norm_key not in norm_header:
                    raise ValueError(f"{path}: missing series header {key}")
                col_index[key] = norm_header.index(norm_key)
        else:
            if c.name not in norm_header:
                raise ValueError(f"{path}: missing column {c.name}")
            col_index[c.name] = norm_header.index(c.name)

    data = {}
    keep = np.ones(len(good), dtype=bool)
    parsed = {}
    for c in schema.columns:
        if c.kind == "categorical":
            cells = [r[col_index[c.name]].strip() for r in good]
            bad = [i for i, v in enumerate(cells) if v not in c.vocabulary]
            for i in bad:
                keep[i] = False
            parsed[c.name] = cells
        elif c.kind == "series":
            arr = np.empty((len(good), c.length))
            for t in range(c.length):
                j = col_index[f"{c.name}[{t}]"]
                for i, r in enumerate(good):
                    try:
                        arr[i, t] = float(r[j])
                    except ValueError:
                        keep[i] = False
                        arr[i, t] = np.nan
            parsed[c.name] = arr
        else:
            j = col_index[c.name]
            arr = np.empty(len(good))
            for i, r in enumerate(good):
                try:
                    arr[i] = float(r[j])
                except ValueError:
                    keep[i] = False
                    arr[i] = np.nan
            parsed[c.name] = arr
    rejected += int((~keep).sum())
    for c in schema.columns:
        if c.kind == "categorical":
            data[c.name] = [v for v, k in zip(parsed[c.name], keep) if k]
        else:
            data[c.name] = parsed[c.name][keep]
    return Dataset(schema=schema, data=data, rejected_rows=rejected)


def raw_matrix(dataset: Dataset):
    """Original-unit values in model-space layout (one-hot applied, no z-score)."""
    schema = dataset.schema
    n = dataset.n_rows
    out = np.zeros((n, schema.width))
    for c in schema.columns:
        off = schema.offset(c.name)
        if c.kind == "categorical":
            index = {v: k for k, v in enumerate(c.vocabulary)}
            for i, v in enumerate(dataset.data[c.name]):
                if v not in index:
                    raise KeyError(f"unseen category {v!r} in column {c.name}")
                out[i, off + index[v]] = 1.0
        elif c.kind == "series":
            out[:, off : off + c.length] = dataset.data[c.name]
        else:
            out[:, off] = dataset.data[c.name]
    return out


def encode(dataset: Dataset, normalization: Normalization):
    """Dataset -> normalized model-space matrix."""
    return normalization.apply(raw_matrix(dataset))


def decode(matrix, schema: TableSchema, normalization: Normalization):
    """Model-space matrix -> original-unit values. Decode is total:
    reals are de-standardized, integers rounded, categoricals arg-maxed.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape[1] != schema.width:
        raise ValueError(f"matrix width {matrix.shape[1]} != schema width {schema.width}")
    raw = normalization.invert(matrix)
    data = {}
    for c in schema.columns:
        off = schema.offset(c.name)
        if c.kind == "categorical":
            block = raw[:, off : off + c.width]
            idx = block.argmax(axis=1)
            data[c.name] = [c.vocabulary[k] for k in idx]
        elif c.kind == "series":
            data[c.name] = np.round(raw[:, off : off + c.length])
        elif c.kind == "integer":
            data[c.name] = np.round(raw[:, off])
        else:
            data[c.name] = raw[:, off].copy()
    return Dataset(schema=schema, data=data)


def decoded_matrix(matrix, schema, normalization):
    """decode() then re-flatten, keeping model-space layout in original units."""
    return raw_matrix(decode(matrix, schema, normalization))


def write_csv(path, dataset: Dataset):
    schema = dataset.schema
    header = []
    for c in schema.columns:
        if c.kind == "series":
            header.extend(f"{c.name}[{t}]" for t in range(c.length))
        else:
            header.append(c.name)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        n = dataset.n_rows
        for i in range(n):
            row = []
            for c in schema.columns:
                v = dataset.data[c.name]
                if c.kind == "categorical":
                    row.append(v[i])
                elif c.kind == "series":
                    row.extend(_fmt(x) for x in v[i])
                else:
                    row.append(_fmt(v[i]))
            w.writerow(row)


def _fmt(x):
    x = float(x)
    return str(int(x)) if x == int(x) else repr(x)


def save_schema(path, schema: TableSchema):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        return TableSchema.from_dict(json.load(fh))


# --- eSIRS simulator --------------------------------------------------------


@dataclass(frozen=True)
class ESIRSParams:
    """Ergodic SIRS chain on a fixed population of size N.

    Transitions: S->I at rate beta_c*S*I/N + eta*S, I->R at rate gamma*I,
    R->S at rate omega*(N-S-I). Trajectories are read out on a uniform
    grid of H points spaced grid_dt apart.
    """

    N: int = 100
    H: int = 30
    beta_c: float = 0.3
    gamma: float = 0.1
    omega: float = 0.05
    eta: float = 0.01
    grid_dt: float = 1.0
    init_i_choices: tuple = (4, 5, 6)
    init_r_choices: tuple = (0, 1)

    def __post_init__(self):
        if self.N <= 0 or self.H <= 0:
            raise ValueError("need N > 0 and H > 0")
        for r in (self.beta_c, self.gamma, self.omega, self.eta):
            if r < 0:
                raise ValueError("rates must be >= 0")

    def to_dict(self):
        return {
            "N": self.N,
            "H": self.H,
            "beta_c": self.beta_c,
            "gamma": self.gamma,
            "omega": self.omega,
            "eta": self.eta,
            "grid_dt": self.grid_dt,
            "init_i_choices": list(self.init_i_choices),
            "init_r_choices": list(self.init_r_choices),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["init_i_choices"] = tuple(d.get("init_i_choices", (4, 5, 6)))
        d["init_r_choices"] = tuple(d.get("init_r_choices", (0, 1)))
        return cls(**d)


def esirs_schema(H):
    return TableSchema([Column("S", "series", length=H), Column("I", "series", length=H)])


def esirs_simulate(params: ESIRSParams, count, seed):
    """Exact event-driven simulation of `count` trajectories, vectorized.

    Every chain advances one reaction per outer iteration; grid readouts
    take the state held on [t_event, t_next_event). Returns an array of
    shape (count, 2, H) with S in channel 0 and I in channel 1.
    """
    rng = np.random.default_rng(seed)
    p = params
    i0 = rng.choice(np.asarray(p.init_i_choices, dtype=float), size=count)
    r0 = rng.choice(np.asarray(p.init_r_choices, dtype=float), size=count)
    s = np.asarray(p.N - i0 - r0, dtype=np.float64)
    i = np.asarray(i0, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("initial state exceeds population size")

    out = np.zeros((count, 2, p.H))
    grid = np.arange(p.H) * p.grid_dt
    t = np.zeros(count)
    gptr = np.zeros(count, dtype=np.int64)

    active = gptr < p.H
    while active.any():
        a1 = p.beta_c * s * i / p.N + p.eta * s
        a2 = p.gamma * i
        a3 = p.omega * (p.N - s - i)
        a0 = a1 + a2 + a3
        with np.errstate(divide="ignore"):
            dt = rng.exponential(1.0, count) / a0  # a0 == 0 -> inf (frozen chain)
        t_next = t + dt

        while True:
            idx = np.minimum(gptr, p.H - 1)
            fill = active & (grid[idx] < t_next) & (gptr < p.H)
            if not fill.any():
                break
            rows = np.nonzero(fill)[0]
            out[rows, 0, gptr[rows]] = s[rows]
            out[rows, 1, gptr[rows]] = i[rows]
            gptr[rows] += 1
        active = gptr < p.H

        u = rng.random(count) * a0
        fire = active & np.isfinite(dt)
        infect = fire & (u < a1)
        recover = fire & ~infect & (u < a1 + a2)
        wane = fire & ~infect & ~recover
        s[infect] -= 1
        i[infect] += 1
        i[recover] -= 1
        s[wane] += 1
        t = np.where(np.isfinite(dt), t_next, t)
    return out


def trajectories_to_matrix(trajectories):
    """(count, 2, H) -> (count, 2H) flattened S(0..H-1) then I(0..H-1)."""
    n, two, H = trajectories.shape
    assert two == 2
    return trajectories.reshape(n, 2 * H)


def esirs_dataset(trajectories, H=None):
    if H is None:
        H = trajectories.shape[2]
    return Dataset(
        schema=esirs_schema(H),
        data={"S": trajectories[:, 0, :].copy(), "I": trajectories[:, 1, :].copy()},
    )
