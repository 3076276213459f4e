"""Dataset directory format and label CSV import.

A dataset directory holds ``manifest.json`` and ``signals.bin``. The binary
file is little-endian float32, row-major lead x time per record, records
concatenated in manifest order; ``lead_data_offset`` is the byte offset of a
record's block.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import DataError, DatasetFormatError
from .signals import (
    DEFAULT_THRESHOLD_MMHG,
    Demographics,
    HemoLabel,
    LabeledDataset,
    SignalRecord,
    UnlabeledDataset,
)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
SIGNALS = "signals.bin"
LABEL_CSV_HEADER = ["record_id", "patient_id", "gender", "age_years", "mpcwp_mmhg"]
_DTYPE = np.dtype("<f4")


def _manifest_text(header, entries):
    # one record per line so parse errors can point at a line
    lines = ["{"]
    for key, value in header.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value)},")
    lines.append('  "records": [')
    for i, entry in enumerate(entries):
        sep = "," if i < len(entries) - 1 else ""
        lines.append("    " + json.dumps(entry) + sep)
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dataset(ds, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if len(ds) == 0:
        raise DataError("refusing to export an empty dataset")
    d, T = ds.records[0].leads.shape
    rate = ds.records[0].sample_rate_hz
    labels = getattr(ds, "labels", None)
    entries = []
    block = d * T * _DTYPE.itemsize
    with open(path / SIGNALS, "wb") as fh:
        for i, rec in enumerate(ds.records):
            if rec.leads.shape != (d, T) or rec.sample_rate_hz != rate:
                raise DataError(f"record {rec.record_id} does not match the dataset shape/rate")
            fh.write(np.ascontiguousarray(rec.leads, dtype=_DTYPE).tobytes())
            entries.append(
                {
                    "record_id": rec.record_id,
                    "patient_id": rec.patient_id,
                    "gender": rec.demographics.gender,
                    "age_years": rec.demographics.age_years,
                    "mpcwp_mmhg": None if labels is None else labels[i].mpcwp_mmhg,
                    "lead_data_offset": i * block,
                }
            )
    header = {"version": FORMAT_VERSION, "d": d, "T": T, "sample_rate_hz": rate}
    (path / MANIFEST).write_text(_manifest_text(header, entries), encoding="utf-8")
    return path


def _line_of(text, needle, occurrence=1):
    pos = -1
    for _ in range(occurrence):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


def import_dataset(path, threshold=DEFAULT_THRESHOLD_MMHG):
    """Read a dataset directory; labeled when every record carries mpcwp_mmhg."""
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing {MANIFEST} in {path}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed manifest: {exc.msg}", line=exc.lineno, offset=exc.pos) from exc
    if not isinstance(manifest, dict):
        raise DatasetFormatError("manifest must be a JSON object", line=1)
    for key in ("version", "d", "T", "sample_rate_hz", "records"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest header missing {key!r}", line=1)
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported manifest version {manifest['version']!r}",
                                 line=_line_of(text, '"version"'))
    d, T, rate = manifest["d"], manifest["T"], manifest["sample_rate_hz"]
    if not all(isinstance(v, int) and v > 0 for v in (d, T, rate)):
        raise DatasetFormatError("d, T and sample_rate_hz must be positive integers", line=1)
    entries = manifest["records"]
    block = d * T * _DTYPE.itemsize
    try:
        raw = np.fromfile(path / SIGNALS, dtype=_DTYPE)
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing {SIGNALS} in {path}") from exc
    expected = len(entries) * block
    if raw.nbytes != expected:
        raise DatasetFormatError(
            f"{SIGNALS} holds {raw.nbytes} bytes, manifest implies {expected}", offset=raw.nbytes
        )
    seen = {}
    records, mpcwp = [], []
    for i, entry in enumerate(entries):
        rid = entry.get("record_id") if isinstance(entry, dict) else None
        line = _line_of(text, json.dumps(rid), seen.get(rid, 0) + 1) if rid is not None else None
        missing = [k for k in ("record_id", "patient_id", "gender", "age_years", "lead_data_offset")
                   if not isinstance(entry, dict) or k not in entry]
        if missing:
            raise DatasetFormatError(f"record {i} missing fields {missing}", line=line)
        if rid in seen:
            raise DatasetFormatError(f"duplicate record_id {rid!r}", line=line)
        seen[rid] = 1
        offset = entry["lead_data_offset"]
        if offset != i * block:
            raise DatasetFormatError(
                f"record {rid!r} lead_data_offset {offset} does not match shape {d}x{T}", line=line, offset=offset
            )
        start = offset // _DTYPE.itemsize
        leads = raw[start:start + d * T].reshape(d, T).astype(np.float32)
        try:
            demo = Demographics(entry["gender"], float(entry["age_years"]))
        except DataError as exc:
            raise DatasetFormatError(f"record {rid!r}: {exc}", line=line) from exc
        records.append(SignalRecord(rid, str(entry["patient_id"]), leads, rate, demo))
        value = entry.get("mpcwp_mmhg")
        if value is not None and not (isinstance(value, (int, float)) and math.isfinite(value)):
            raise DatasetFormatError(f"record {rid!r}: bad mpcwp_mmhg {value!r}", line=line)
        mpcwp.append(value)
    n_labeled = sum(v is not None for v in mpcwp)
    if n_labeled == 0:
        return UnlabeledDataset(records)
    if n_labeled != len(records):
        raise DatasetFormatError("manifest mixes labeled and unlabeled records")
    return LabeledDataset(records, [HemoLabel.from_mpcwp(v, threshold) for v in mpcwp])


def import_label_table(path):
    """Parse a label CSV into {record_id: (patient_id, Demographics, mpcwp_mmhg)}."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_CSV_HEADER:
            raise DatasetFormatError(f"label CSV header must be {','.join(LABEL_CSV_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(LABEL_CSV_HEADER):
                raise DatasetFormatError(f"expected {len(LABEL_CSV_HEADER)} fields, got {len(row)}", line=line)
            rid, pid, gender, age, value = row
            if rid in table:
                raise DatasetFormatError(f"duplicate record_id {rid!r}", line=line)
            try:
                demo = Demographics(gender, float(age))
                mpcwp = float(value)
            except (ValueError, DataError) as exc:
                raise DatasetFormatError(str(exc), line=line) from exc
            if not math.isfinite(mpcwp):
                raise DatasetFormatError(f"non-finite mpcwp_mmhg {value!r}", line=line)
            table[rid] = (pid, demo, mpcwp)
    return table


def export_label_table(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_CSV_HEADER)
        for rec, lab in zip(ds.records, ds.labels):
            writer.writerow([rec.record_id, rec.patient_id, rec.demographics.gender,
                             repr(rec.demographics.age_years), repr(lab.mpcwp_mmhg)])


def attach_labels(ds, table, threshold=DEFAULT_THRESHOLD_MMHG):
    """Pair records with a label table; demographics and patient ids come from the table."""
    records, labels = [], []
    for rec in ds.records:
        if rec.record_id not in table:
            raise DataError(f"no label for record {rec.record_id!r}")
        pid, demo, mpcwp = table[rec.record_id]
        records.append(SignalRecord(rec.record_id, pid, rec.leads, rec.sample_rate_hz, demo))
        labels.append(HemoLabel.from_mpcwp(mpcwp, threshold))
    return LabeledDataset(records, labels)


def directory_digest(path):
    """SHA-256 over relative names and bytes of every file under ``path``."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
