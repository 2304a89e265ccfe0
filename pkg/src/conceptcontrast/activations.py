"""Activation dumps: the neuron-output matrix of one feature layer plus
per-sample labels.

Two on-disk encodings are supported and picked by file extension:

Binary (any extension other than ``.csv``), all integers little-endian::

    b"COCA"  version:u16  N:u32  M:u32  C:u16  S:u16  flags:u8
    layer_name: u16 length + UTF-8 bytes
    N*M float32, row-major (row = neuron, column = sample)
    M records: sample_id (u16 length + UTF-8), class:u16, domain:u16,
               predicted:u16 (only when flags bit 0 is set)

Text: ``<stem>.csv`` holds the N x M matrix (one neuron per line) and
``<stem>.jsonl`` holds a header object followed by one object per sample.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DataError,
    FormatError,
    MissingPredictionError,
)

MAGIC = b"COCA"
VERSION = 1
FLAG_PREDICTIONS = 0x01

_HEADER = struct.Struct("<4sHIIHHB")
_U16 = struct.Struct("<H")
_MAX_U16 = 0xFFFF


@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    class_label: int
    domain_label: int
    predicted_class: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ActivationDataset:
    """Neuron outputs of a single layer, shape ``(n_neurons, n_samples)``.

    Activations are held as read-only float32 so that a write/load cycle is
    bit-exact. Neuron ids are implicitly ``0..N-1``.
    """

    activations: np.ndarray
    samples: tuple
    n_classes: int
    n_domains: int
    layer_name: str = "features"

    def __post_init__(self):
        acts = np.array(self.activations, dtype=np.float32, copy=True)
        if acts.ndim != 2:
            raise ConsistencyError(f"activations must be 2-D, got shape {acts.shape}")
        acts.setflags(write=False)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "samples", tuple(self.samples))
        self._validate()

    def _validate(self):
        acts = self.activations
        if len(self.samples) != acts.shape[1]:
            raise ConsistencyError(
                f"{len(self.samples)} metadata rows but {acts.shape[1]} matrix columns"
            )
        bad = ~np.isfinite(acts)
        if bad.any():
            n, m = np.argwhere(bad)[0]
            raise DataError(f"non-finite activation at neuron {n}, sample {m}")
        if not (1 <= self.n_classes <= _MAX_U16 and 1 <= self.n_domains <= _MAX_U16):
            raise ConsistencyError("n_classes and n_domains must be in [1, 65535]")
        seen = set()
        has_pred = [s.predicted_class is not None for s in self.samples]
        if any(has_pred) and not all(has_pred):
            raise ConsistencyError("predicted_class must be present on all samples or none")
        for s in self.samples:
            if s.sample_id in seen:
                raise ConsistencyError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
            if not 0 <= s.class_label < self.n_classes:
                raise ConsistencyError(f"class_label {s.class_label} outside [0, {self.n_classes})")
            if not 0 <= s.domain_label < self.n_domains:
                raise ConsistencyError(f"domain_label {s.domain_label} outside [0, {self.n_domains})")
            if s.predicted_class is not None and not 0 <= s.predicted_class < self.n_classes:
                raise ConsistencyError(f"predicted_class {s.predicted_class} outside [0, {self.n_classes})")

    @property
    def n_neurons(self):
        return self.activations.shape[0]

    @property
    def n_samples(self):
        return self.activations.shape[1]

    @property
    def neuron_ids(self):
        return list(range(self.n_neurons))

    @property
    def sample_ids(self):
        return [s.sample_id for s in self.samples]

    @property
    def class_labels(self):
        return np.array([s.class_label for s in self.samples], dtype=np.int64)

    @property
    def domain_labels(self):
        return np.array([s.domain_label for s in self.samples], dtype=np.int64)

    @property
    def has_predictions(self):
        return bool(self.samples) and self.samples[0].predicted_class is not None

    def __eq__(self, other):
        if not isinstance(other, ActivationDataset):
            return NotImplemented
        return (
            self.samples == other.samples
            and self.n_classes == other.n_classes
            and self.n_domains == other.n_domains
            and self.layer_name == other.layer_name
            and self.activations.shape == other.activations.shape
            and self.activations.tobytes() == other.activations.tobytes()
        )

    def slice(self, class_label, domain_label, correct_only=False):
        """Columns whose sample has the given class and domain.

        With ``correct_only`` the model must also have predicted the true
        class for the sample.
        """
        if not 0 <= class_label < self.n_classes:
            raise ConsistencyError(f"class_label {class_label} outside [0, {self.n_classes})")
        if not 0 <= domain_label < self.n_domains:
            raise ConsistencyError(f"domain_label {domain_label} outside [0, {self.n_domains})")
        if correct_only and not self.has_predictions:
            raise MissingPredictionError("correct_only requires predicted_class on every sample")
        cols = [
            i
            for i, s in enumerate(self.samples)
            if s.class_label == class_label
            and s.domain_label == domain_label
            and (not correct_only or s.predicted_class == class_label)
        ]
        return SliceView(self, tuple(cols), class_label, domain_label)


@dataclass(frozen=True)
class SliceView:
    parent: ActivationDataset = field(repr=False)
    column_indices: tuple
    class_label: int
    domain_label: int

    def __post_init__(self):
        idx = self.column_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConsistencyError("slice column indices must be strictly increasing")
        if idx and not (0 <= idx[0] and idx[-1] < self.parent.n_samples):
            raise ConsistencyError("slice column index out of range")

    def __len__(self):
        return len(self.column_indices)

    @property
    def tag(self):
        return (self.class_label, self.domain_label)

    @property
    def activations(self):
        return self.parent.activations[:, list(self.column_indices)]

    @property
    def sample_ids(self):
        samples = self.parent.samples
        return [samples[i].sample_id for i in self.column_indices]


def make_dataset(activations, class_labels, domain_labels, predicted=None,
                 sample_ids=None, n_classes=None, n_domains=None,
                 layer_name="features"):
    """Convenience constructor from parallel label arrays."""
    class_labels = [int(c) for c in class_labels]
    domain_labels = [int(d) for d in domain_labels]
    m = len(class_labels)
    if sample_ids is None:
        sample_ids = [f"s{i:06d}" for i in range(m)]
    if predicted is None:
        predicted = [None] * m
    else:
        predicted = [int(p) for p in predicted]
    samples = [
        SampleMeta(str(sid), c, d, p)
        for sid, c, d, p in zip(sample_ids, class_labels, domain_labels, predicted)
    ]
    if n_classes is None:
        n_classes = max(class_labels + [p for p in predicted if p is not None], default=0) + 1
    if n_domains is None:
        n_domains = max(domain_labels, default=0) + 1
    return ActivationDataset(np.asarray(activations), samples, n_classes, n_domains, layer_name)


def is_text_path(path):
    return Path(path).suffix.lower() == ".csv"


def sidecar_path(path):
    return Path(path).with_suffix(".jsonl")


def load_activation_dump(path):
    """Read a dump, auto-detecting binary vs. CSV+JSONL by extension."""
    path = Path(path)
    if is_text_path(path):
        return _load_text(path)
    return _load_binary(path.read_bytes())


def write_activation_dump(ds, path):
    path = Path(path)
    if is_text_path(path):
        _write_text(ds, path)
    else:
        path.write_bytes(encode_binary(ds))


def encode_binary(ds):
    name = ds.layer_name.encode("utf-8")
    if len(name) > _MAX_U16:
        raise FormatError("layer name too long")
    flags = FLAG_PREDICTIONS if ds.has_predictions else 0
    parts = [
        _HEADER.pack(MAGIC, VERSION, ds.n_neurons, ds.n_samples,
                     ds.n_classes, ds.n_domains, flags),
        _U16.pack(len(name)),
        name,
        ds.activations.astype("<f4", copy=False).tobytes(order="C"),
    ]
    for s in ds.samples:
        sid = s.sample_id.encode("utf-8")
        if len(sid) > _MAX_U16:
            raise FormatError(f"sample_id too long: {s.sample_id[:20]!r}...")
        parts.append(_U16.pack(len(sid)))
        parts.append(sid)
        if flags & FLAG_PREDICTIONS:
            parts.append(struct.pack("<HHH", s.class_label, s.domain_label, s.predicted_class))
        else:
            parts.append(struct.pack("<HH", s.class_label, s.domain_label))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated dump while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def string(self, what):
        (n,) = self.unpack(_U16, what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}") from exc


def _load_binary(buf):
    r = _Reader(buf)
    magic, version, n, m, c, s, flags = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported dump version {version}")
    if flags & ~FLAG_PREDICTIONS:
        raise FormatError(f"unknown flag bits {flags:#04x}")
    layer = r.string("layer name")
    if r.pos + 4 * n * m > len(buf):
        raise ConsistencyError(
            f"header declares {n}x{m} matrix but only {len(buf) - r.pos} bytes follow"
        )
    acts = np.frombuffer(r.take(4 * n * m, "matrix"), dtype="<f4").reshape(n, m)
    rec = struct.Struct("<HHH" if flags & FLAG_PREDICTIONS else "<HH")
    samples = []
    for i in range(m):
        try:
            sid = r.string("sample_id")
            vals = r.unpack(rec, "metadata record")
        except FormatError as exc:
            raise ConsistencyError(
                f"matrix has {m} columns but metadata ended after {i} records"
            ) from exc
        pred = vals[2] if len(vals) == 3 else None
        samples.append(SampleMeta(sid, vals[0], vals[1], pred))
    if r.pos != len(buf):
        raise ConsistencyError(f"{len(buf) - r.pos} trailing bytes after {m} metadata records")
    return ActivationDataset(acts, samples, c, s, layer)


def _write_text(ds, path):
    lines = [",".join(f"{v:.9g}" for v in row) for row in ds.activations.tolist()]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    header = {
        "format": "coca-text",
        "version": VERSION,
        "n_neurons": ds.n_neurons,
        "n_classes": ds.n_classes,
        "n_domains": ds.n_domains,
        "layer_name": ds.layer_name,
        "has_predictions": ds.has_predictions,
    }
    out = [json.dumps(header)]
    for s in ds.samples:
        rec = {"sample_id": s.sample_id, "class": s.class_label, "domain": s.domain_label}
        if ds.has_predictions:
            rec["predicted"] = s.predicted_class
        out.append(json.dumps(rec))
    sidecar_path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def _load_text(path):
    meta_lines = [ln for ln in sidecar_path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not meta_lines:
        raise FormatError("empty metadata sidecar")
    try:
        header = json.loads(meta_lines[0])
        records = [json.loads(ln) for ln in meta_lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad JSON in metadata sidecar: {exc}") from exc
    if header.get("format") != "coca-text" or header.get("version") != VERSION:
        raise FormatError("metadata sidecar header missing or unsupported")
    try:
        samples = [
            SampleMeta(str(r["sample_id"]), int(r["class"]), int(r["domain"]),
                       int(r["predicted"]) if header["has_predictions"] else None)
            for r in records
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed metadata record: {exc}") from exc

    n = int(header.get("n_neurons", 0))
    rows = []
    for i, ln in enumerate(path.read_text(encoding="utf-8").splitlines()):
        try:
            rows.append([float(v) for v in ln.split(",")] if ln.strip() else [])
        except ValueError as exc:
            raise FormatError(f"non-numeric value on matrix line {i + 1}") from exc
    if len(rows) != n:
        raise ConsistencyError(f"header declares {n} neurons but matrix has {len(rows)} rows")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ConsistencyError(f"ragged matrix rows: widths {sorted(widths)}")
    m = widths.pop() if widths else len(samples)
    acts = np.array(rows, dtype=np.float64).reshape(n, m)
    if m != len(samples):
        raise ConsistencyError(f"{len(samples)} metadata rows but {m} matrix columns")
    return ActivationDataset(acts, samples, int(header["n_classes"]),
                             int(header["n_domains"]), str(header.get("layer_name", "")))


def partition_counts(ds: ActivationDataset, correct_only=False) -> dict:
    """Sample count of every (class, domain) slice."""
    return {
        (c, s): len(ds.slice(c, s, correct_only))
        for c in range(ds.n_classes)
        for s in range(ds.n_domains)
    }


def stack_columns(datasets: Sequence[ActivationDataset]) -> ActivationDataset:
    """Concatenate datasets sample-wise (same neurons, disjoint sample ids)."""
    first = datasets[0]
    if any(d.n_neurons != first.n_neurons for d in datasets):
        raise ConsistencyError("datasets disagree on neuron count")
    acts = np.concatenate([d.activations for d in datasets], axis=1)
    samples = [s for d in datasets for s in d.samples]
    return ActivationDataset(acts, samples, max(d.n_classes for d in datasets),
                             max(d.n_domains for d in datasets), first.layer_name)

