"""Dataset plumbing: report manifests and precomputed image-feature files.

A dataset is two plain files. `manifest.jsonl` carries one report record per
line; the feature file is a small binary matrix (magic "FFMX") whose rows are
bound to records through a `.ids` sidecar listing one record id per row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureFormatError, FeatureValidationError, ManifestError

SPLITS = ("train", "val", "test")

FEATURE_MAGIC = b"FFMX"


@dataclass(frozen=True)
class ImageRef:
    path: str
    modality: str = ""


@dataclass
class ReportRecord:
    """One study: a unique id, a split, the reference report, its images.

    `feature_row` is the index of this record's row in the feature matrix;
    it is bound by `load_features` and stays None for records without
    precomputed features.
    """

    id: str
    split: str
    report: str
    images: tuple[ImageRef, ...] = ()
    feature_row: int | None = None

    def __post_init__(self):
        if not self.id:
            raise ManifestError("record id must be non-empty")
        if self.split not in SPLITS:
            raise ManifestError(
                f"record {self.id!r}: split must be one of {SPLITS}, got {self.split!r}"
            )
        if not self.report:
            raise ManifestError(f"record {self.id!r}: report text must be non-empty")


@dataclass
class Corpus:
    """Ordered collection of records with unique ids."""

    records: list[ReportRecord] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, record_id: str) -> ReportRecord:
        rec = self.index().get(record_id)
        if rec is None:
            raise ManifestError(f"unknown record id {record_id!r}")
        return rec

    def index(self) -> dict[str, ReportRecord]:
        cached = getattr(self, "_index", None)
        if cached is None or len(cached) != len(self.records):
            cached = {rec.id: rec for rec in self.records}
            self._index = cached
        return cached

    def split(self, name: str) -> list[ReportRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [rec for rec in self.records if rec.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}


def _record_from_obj(obj: dict, lineno: int) -> ReportRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"manifest line {lineno}: expected a JSON object")
    try:
        images_raw = obj.get("images", [])
        if not isinstance(images_raw, list):
            raise ManifestError(f"manifest line {lineno}: images must be an array")
        images = tuple(
            ImageRef(path=str(img.get("path", "")), modality=str(img.get("modality", "")))
            for img in images_raw
        )
        return ReportRecord(
            id=str(obj.get("id", "")),
            split=str(obj.get("split", "")),
            report=str(obj.get("report", "")),
            images=images,
        )
    except ManifestError as exc:
        raise ManifestError(f"manifest line {lineno}: {exc}") from exc


def load_manifest(path: str | Path) -> Corpus:
    """Read manifest.jsonl, preserving record order.

    Errors carry the 1-based line number; duplicate ids name the id.
    """
    records: list[ReportRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"manifest line {lineno}: invalid JSON: {exc}") from exc
            rec = _record_from_obj(obj, lineno)
            if rec.id in seen:
                raise ManifestError(f"manifest line {lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return Corpus(records=records)


def save_manifest(corpus: Corpus, path: str | Path) -> None:
    """Write manifest.jsonl in canonical form (fixed key order, UTF-8).

    save(load(p)) reproduces a canonically written file byte for byte.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            obj = {
                "id": rec.id,
                "split": rec.split,
                "report": rec.report,
                "images": [{"path": im.path, "modality": im.modality} for im in rec.images],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


@dataclass
class FeatureMatrix:
    """Dense float32 feature rows plus the record id owning each row."""

    values: np.ndarray
    row_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise FeatureValidationError(
                f"feature matrix must be 2-D, got shape {self.values.shape}"
            )
        if self.values.shape[0] != len(self.row_ids):
            raise FeatureValidationError(
                f"{self.values.shape[0]} feature rows but {len(self.row_ids)} row ids"
            )
        bad = np.argwhere(~np.isfinite(self.values))
        if bad.size:
            r, c = (int(x) for x in bad[0])
            raise FeatureValidationError(
                f"non-finite feature value at row {r}, column {c} (record {self.row_ids[r]!r})"
            )
        self._row_of = {rid: i for i, rid in enumerate(self.row_ids)}
        if len(self._row_of) != len(self.row_ids):
            raise FeatureValidationError("duplicate record id in feature rows")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def row_for_id(self, record_id: str) -> np.ndarray | None:
        i = self._row_of.get(record_id)
        return None if i is None else self.values[i]


def _sidecar_path(path: str | Path) -> Path:
    # Sidecar naming: the feature file path with ".ids" appended.
    return Path(str(path) + ".ids")


def save_features(matrix: FeatureMatrix, path: str | Path) -> None:
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(values.tobytes(order="C"))
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        for rid in matrix.row_ids:
            fh.write(rid + "\n")


def load_features(path: str | Path, corpus: Corpus | None = None) -> FeatureMatrix:
    """Read a feature file and its id sidecar.

    When a corpus is given, every row id must resolve to a record; matching
    records get their `feature_row` index bound in place.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFormatError(
                f"bad magic {magic!r} in {path}; expected {FEATURE_MAGIC!r}"
            )
        header = fh.read(8)
        if len(header) != 8:
            raise FeatureFormatError(f"truncated header in {path}")
        rows, cols = struct.unpack("<II", header)
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise FeatureFormatError(
            f"feature payload is {len(payload)} bytes, expected {expected} "
            f"({rows} rows x {cols} cols) in {path}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()

    sidecar = _sidecar_path(path)
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            row_ids = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    except FileNotFoundError as exc:
        raise FeatureFormatError(f"missing feature id sidecar {sidecar}") from exc
    if len(row_ids) != rows:
        raise FeatureValidationError(
            f"sidecar {sidecar} lists {len(row_ids)} ids but matrix has {rows} rows"
        )

    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = (int(x) for x in bad[0])
        raise FeatureValidationError(
            f"non-finite feature value at row {r}, column {c} (record {row_ids[r]!r})"
        )

    matrix = FeatureMatrix(values=values, row_ids=row_ids)
    if corpus is not None:
        index = corpus.index()
        for i, rid in enumerate(row_ids):
            rec = index.get(rid)
            if rec is None:
                raise FeatureValidationError(
                    f"feature row {i} references unknown record id {rid!r}"
                )
            rec.feature_row = i
    return matrix
