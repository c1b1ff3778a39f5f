"""Readers for the PTB-XL on-disk layout: WFDB headers, format-16 signal
files and ``ptbxl_database.csv``.

Only storage format 16 is accepted. Header checksum and block-size fields
are read past but never verified.
"""
import ast
import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateRecord,
    EmptyRecord,
    InconsistentHeader,
    ParseError,
    SchemaError,
    TruncatedSignal,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

INVALID_SAMPLE = -32768
DEFAULT_GAIN = 200.0
STANDARD_LEADS = ("I", "II", "III", "AVR", "AVL", "AVF",
                  "V1", "V2", "V3", "V4", "V5", "V6")
INDEX_COLUMNS = ("ecg_id", "scp_codes", "strat_fold", "filename_lr", "filename_hr")


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int
    gain: float
    adc_baseline: int
    lead_name: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple

    @property
    def lead_names(self):
        return [s.lead_name for s in self.signals]


@dataclass
class EcgRecord:
    ecg_id: int
    sampling_rate: float
    samples: np.ndarray  # (n_channels, n_samples), millivolts
    lead_names: list
    invalid_samples: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (channels, samples) matrix")
        if self.samples.shape[0] != len(self.lead_names):
            raise ValueError("one lead name per channel required")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("record contains non-finite samples")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    def select_leads(self, leads):
        """Return a copy restricted to ``leads`` (case-insensitive), in that order."""
        upper = [n.upper() for n in self.lead_names]
        try:
            rows = [upper.index(lead.upper()) for lead in leads]
        except ValueError as exc:
            raise SchemaError(f"record {self.ecg_id} lacks a requested lead: {exc}") from None
        return EcgRecord(self.ecg_id, self.sampling_rate, self.samples[rows].copy(),
                         [self.lead_names[r] for r in rows], self.invalid_samples)


@dataclass(frozen=True)
class IndexRow:
    ecg_id: int
    scp_codes: dict
    strat_fold: int
    filename_lr: str
    filename_hr: str

    def filename(self, resolution):
        return self.filename_lr if int(resolution) == 100 else self.filename_hr


@dataclass
class DatasetIndex:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def by_id(self):
        return {r.ecg_id: r for r in self.rows}


# --- headers ---------------------------------------------------------------

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+]?\d+)\))?(?:/(.*))?$")


def _leading_int(token, line_no, what):
    m = re.match(r"^(\d+)", token)
    if not m:
        raise ParseError(f"bad {what} {token!r}", line_no)
    return int(m.group(1))


def parse_header(text):
    """Parse WFDB header text into a :class:`RecordHeader`."""
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty header", 1)

    line_no, first = lines[0]
    tok = first.split()
    if len(tok) < 4:
        raise ParseError("record line needs name, signal count, frequency and length", line_no)
    name = tok[0]
    if "/" in name:
        raise UnsupportedFormat("multi-segment records are not supported")
    try:
        n_signals = int(tok[1])
        fs = float(tok[2].split("/")[0].split("(")[0])
        n_samples = int(tok[3])
    except ValueError:
        raise ParseError(f"malformed record line {first!r}", line_no) from None
    if n_signals < 0 or fs <= 0 or n_samples < 0:
        raise ParseError(f"non-positive values in record line {first!r}", line_no)

    signals = []
    for line_no, ln in lines[1:]:
        tok = ln.split()
        if len(tok) < 2:
            raise ParseError(f"signal line too short: {ln!r}", line_no)
        fmt = _leading_int(tok[1], line_no, "format")
        if fmt != 16:
            raise UnsupportedFormat(f"storage format {fmt} (line {line_no}); only 16 is supported")
        gain, baseline = DEFAULT_GAIN, None
        if len(tok) > 2:
            m = _GAIN_RE.match(tok[2])
            if not m:
                raise ParseError(f"bad gain field {tok[2]!r}", line_no)
            gain = float(m.group(1))
            if m.group(2) is not None:
                baseline = int(m.group(2))
        if gain == 0:
            gain = DEFAULT_GAIN
        if not (gain > 0 and math.isfinite(gain)):
            raise ParseError(f"gain must be positive, got {gain}", line_no)
        if baseline is None:
            # baseline defaults to the ADC zero (field 5)
            baseline = int(tok[4]) if len(tok) > 4 and re.fullmatch(r"[-+]?\d+", tok[4]) else 0
        # fields 3..7 are resolution, adc zero, initial value, checksum, block size
        lead = " ".join(tok[8:]) if len(tok) > 8 else ""
        if not lead:
            raise ParseError("signal line has no lead name", line_no)
        signals.append(SignalSpec(tok[0], fmt, gain, baseline, lead))

    if len(signals) != n_signals:
        raise InconsistentHeader(
            f"header declares {n_signals} signals but lists {len(signals)}")
    return RecordHeader(name, n_signals, fs, n_samples, tuple(signals))


def render_header(header):
    """Inverse of :func:`parse_header` for the fields it reads."""
    fs = f"{header.sampling_rate:g}"
    out = [f"{header.record_name} {header.n_signals} {fs} {header.n_samples}"]
    for s in header.signals:
        out.append(f"{s.file_name} {s.storage_format} {s.gain:g}({s.adc_baseline})/mV "
                   f"16 0 0 0 0 {s.lead_name}")
    return "\n".join(out) + "\n"


# --- signal files ------------------------------------------------------------

def _ecg_id_from_name(name):
    m = re.match(r"^(\d+)", name)
    return int(m.group(1)) if m else 0


def decode_format16(header, data, ecg_id=None):
    """Decode frame-interleaved little-endian int16 samples into millivolts.

    Samples equal to the WFDB invalid sentinel are replaced by the last
    valid value of the same channel (0.0 when none precedes them).
    """
    if header.n_samples == 0:
        raise EmptyRecord(f"record {header.record_name} has no samples")
    expected = header.n_signals * header.n_samples * 2
    if len(data) != expected:
        raise TruncatedSignal(
            f"record {header.record_name}: expected {expected} bytes, got {len(data)}")

    raw = np.frombuffer(data, dtype="<i2").reshape(header.n_samples, header.n_signals).T
    gains = np.array([s.gain for s in header.signals], dtype=np.float64)[:, None]
    base = np.array([s.adc_baseline for s in header.signals], dtype=np.float64)[:, None]
    mv = (raw.astype(np.float64) - base) / gains

    invalid = raw == INVALID_SAMPLE
    n_invalid = int(invalid.sum())
    if n_invalid:
        log.warning("record %s: %d invalid samples carried forward",
                    header.record_name, n_invalid)
        mv = _carry_forward(mv, invalid)

    return EcgRecord(
        ecg_id=_ecg_id_from_name(header.record_name) if ecg_id is None else ecg_id,
        sampling_rate=header.sampling_rate,
        samples=mv,
        lead_names=header.lead_names,
        invalid_samples=n_invalid,
    )


def _carry_forward(values, invalid):
    n = values.shape[1]
    pos = np.where(~invalid, np.arange(n)[None, :], -1)
    np.maximum.accumulate(pos, axis=1, out=pos)
    filled = np.take_along_axis(values, np.maximum(pos, 0), axis=1)
    return np.where(pos < 0, 0.0, filled)


def encode_format16(samples_mv, gains, baselines):
    """Quantize a (channels, samples) millivolt matrix to format-16 bytes."""
    samples_mv = np.asarray(samples_mv, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)[:, None]
    baselines = np.asarray(baselines, dtype=np.float64)[:, None]
    stored = np.rint(samples_mv * gains + baselines)
    if stored.min(initial=0) <= INVALID_SAMPLE or stored.max(initial=0) > 32767:
        raise ValueError("samples not representable in 16 bits at this gain")
    return stored.astype("<i2").T.tobytes()


def read_record(path, ecg_id=None):
    """Read ``path``.hea and its signal file. ``path`` may carry the .hea suffix."""
    path = Path(path)
    if path.suffix in (".hea", ".dat"):
        path = path.with_suffix("")
    header = parse_header(path.with_suffix(".hea").read_text())
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise UnsupportedFormat("signals spread over several files are not supported")
    data = (path.parent / files.pop()).read_bytes()
    return decode_format16(header, data, ecg_id=ecg_id)


def write_record(path, record, gain=1000.0, baseline=0):
    """Write ``record`` as ``path``.hea + ``path``.dat (format 16)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = path.name
    n = record.n_channels
    header = RecordHeader(
        name, n, record.sampling_rate, record.n_samples,
        tuple(SignalSpec(name + ".dat", 16, gain, baseline, lead) for lead in record.lead_names),
    )
    path.with_suffix(".dat").write_bytes(encode_format16(record.samples, [gain] * n, [baseline] * n))
    path.with_suffix(".hea").write_text(render_header(header))
    return header


# --- metadata ------------------------------------------------------------------

def parse_scp_codes(text):
    """Parse a stringified ``{'CODE': confidence, ...}`` map."""
    text = text.strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise ParseError(f"scp_codes is not a brace-delimited map: {text!r}")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        raise ParseError(f"cannot parse scp_codes {text!r}") from None
    if not isinstance(value, dict):
        raise ParseError(f"scp_codes is not a map: {text!r}")
    if not value:
        raise ParseError("scp_codes must not be empty")
    out = {}
    for code, conf in value.items():
        if not isinstance(code, str) or not code:
            raise ParseError(f"bad scp code key {code!r}")
        if isinstance(conf, bool) or not isinstance(conf, (int, float)):
            raise ParseError(f"non-numeric confidence for {code!r}")
        conf = float(conf)
        if not 0.0 <= conf <= 100.0:
            raise ParseError(f"confidence for {code!r} outside [0, 100]: {conf}")
        out[code] = conf
    return out


def render_scp_codes(codes):
    return "{" + ", ".join(f"{k!r}: {float(v)!r}" for k, v in codes.items()) + "}"


def load_index(text):
    """Parse ``ptbxl_database.csv`` contents into a :class:`DatasetIndex`."""
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in INDEX_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"metadata CSV is missing columns: {', '.join(missing)}")

    rows, seen = [], set()
    for row in reader:
        line = reader.line_num
        try:
            ecg_id = int(float(row["ecg_id"]))
            fold = int(float(row["strat_fold"]))
        except (TypeError, ValueError):
            raise SchemaError(f"line {line}: non-integer ecg_id or strat_fold") from None
        if not 1 <= fold <= 10:
            raise SchemaError(f"line {line}: strat_fold {fold} outside 1..10")
        if ecg_id in seen:
            raise DuplicateRecord(f"ecg_id {ecg_id} appears more than once")
        seen.add(ecg_id)
        try:
            codes = parse_scp_codes(row["scp_codes"] or "")
        except ParseError as exc:
            raise ParseError(f"ecg_id {ecg_id}: {exc}", line) from None
        rows.append(IndexRow(ecg_id, codes, fold, row["filename_lr"] or "", row["filename_hr"] or ""))
    return DatasetIndex(rows)


def split_folds(index):
    """Folds 1-8 train, fold 9 validation, fold 10 test."""
    split = {"train": [], "val": [], "test": []}
    for row in index:
        if row.strat_fold <= 8:
            split["train"].append(row.ecg_id)
        elif row.strat_fold == 9:
            split["val"].append(row.ecg_id)
        else:
            split["test"].append(row.ecg_id)
    return split
