"""On-disk formats: dataset containers, flat key-value configs, report CSV.

Dataset file: ``b"HMMX1"``, little-endian ``u32 d``, ``u32 n``, then the
``d * n`` matrix as ``f64`` in column-major order. The label sidecar is
``b"HMML1"``, ``u32 n``, then ``n`` signed bytes (+1/-1).

Config files hold one ``key = value`` per line; ``#`` starts a comment and
comma-separated values form a list. Floats are written with ``repr`` so they
read back bit-for-bit.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

DATA_MAGIC = b"HMMX1"
LABEL_MAGIC = b"HMML1"

CSV_FIELDS = ("n", "d", "delta", "theta_norm_sq", "estimator", "trials", "mean_sq_loss",
              "stderr", "q50", "q90", "q95", "mean_ell_used", "phi_ref", "global_ref", "valid")


class FormatError(ValueError):
    pass


def write_dataset(path, Y: np.ndarray) -> None:
    Y = np.asarray(Y, dtype="<f8")
    d, n = Y.shape
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<II", d, n))
        fh.write(Y.tobytes(order="F"))


def read_dataset(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != DATA_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    d, n = struct.unpack_from("<II", raw, 5)
    body = raw[13:]
    if len(body) != 8 * d * n:
        raise FormatError(f"{path}: expected {8 * d * n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape((d, n), order="F").astype(float)


def labels_path(path) -> Path:
    return Path(str(path) + ".labels")


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.int8)
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<I", labels.size))
        fh.write(labels.tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != LABEL_MAGIC:
        raise FormatError(f"{path}: not a label file (bad magic)")
    (n,) = struct.unpack_from("<I", raw, 5)
    labels = np.frombuffer(raw[9:], dtype=np.int8)
    if labels.size != n:
        raise FormatError(f"{path}: expected {n} labels, found {labels.size}")
    return labels.copy()


# -- flat configs -----------------------------------------------------------------

def _scalar(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    if "," in text:
        return [_scalar(t) for t in text.split(",") if t.strip()]
    return _scalar(text)


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(), str(path))


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


# -- CSV ----------------------------------------------------------------------

def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        c = r.cell
        writer.writerow([_csv_cell(v) for v in (
            c.n, c.d, float(c.delta), float(c.theta_norm_sq), c.estimator, r.trials,
            r.mean_sq_loss, r.stderr, r.q50, r.q90, r.q95, r.mean_ell_used,
            r.phi_reference, r.global_rate_reference, bool(r.valid))])
    return buf.getvalue()


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()
