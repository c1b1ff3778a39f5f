"""Seeded synthetic ECG records for tests, benchmarks and demos.

Two beat families stand in for the binary classes: "normal" beats have a
narrow QRS and upright T wave; "abnormal" beats have a wide, notched QRS,
a depressed ST segment and an inverted T wave. Each record adds heart-rate
jitter, per-lead projection gains, white noise and slow baseline drift.
"""
import csv
from pathlib import Path

import numpy as np

from .wfdb_ingest import STANDARD_LEADS, EcgRecord, render_scp_codes, write_record

ABNORMAL_CODES = ("IMI", "ASMI", "LNGQT", "NST_", "LVH", "CRBBB", "AFIB", "1AVB")

# (centre s, width s, amplitude mV) relative to the R peak
_NORMAL_WAVES = ((-0.20, 0.025, 0.12), (-0.03, 0.010, -0.10), (0.0, 0.012, 1.10),
                 (0.03, 0.010, -0.25), (0.25, 0.045, 0.30))
_ABNORMAL_WAVES = ((-0.20, 0.025, 0.08), (-0.04, 0.020, 0.55), (0.02, 0.022, 0.70),
                   (0.10, 0.050, -0.12), (0.28, 0.050, -0.28))


def _lead_gains(n_leads, seed=1234):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0.4, 1.2, size=n_leads)
    g *= np.where(rng.random(n_leads) < 0.25, -1.0, 1.0)
    return g


def beat_train(t, label, rng):
    """Sum of Gaussian waves at jittered beat times for one record."""
    waves = _ABNORMAL_WAVES if label else _NORMAL_WAVES
    rr = 60.0 / rng.uniform(55, 100)
    first = rng.uniform(0.1, rr)
    beats = np.arange(first, t[-1] + rr, rr) + rng.normal(0, 0.01, size=1)
    sig = np.zeros_like(t)
    for centre in beats:
        for offset, width, amp in waves:
            a = amp * rng.uniform(0.85, 1.15)
            sig += a * np.exp(-0.5 * ((t - centre - offset) / width) ** 2)
    return sig


def make_record(ecg_id, label, fs=100, seconds=10.0, leads=STANDARD_LEADS, seed=0,
                noise_mv=0.03, drift_mv=0.3, powerline_mv=0.0):
    rng = np.random.default_rng([seed, ecg_id])
    n = int(round(fs * seconds))
    t = np.arange(n) / fs
    base = beat_train(t, label, rng)
    gains = _lead_gains(len(STANDARD_LEADS))
    rows = []
    for lead in leads:
        g = gains[STANDARD_LEADS.index(lead.upper())] if lead.upper() in STANDARD_LEADS else 1.0
        drift = drift_mv * rng.uniform(0.5, 1.0) * np.sin(
            2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
        row = g * base + drift + rng.normal(0, noise_mv, size=n)
        if powerline_mv and fs > 100:
            row += powerline_mv * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
        rows.append(row)
    return EcgRecord(ecg_id, float(fs), np.array(rows), list(leads))


def make_dataset(n_records=600, fs=100, seconds=10.0, leads=STANDARD_LEADS, seed=0,
                 normal_fraction=0.45, **kwargs):
    """Return (records, labels, folds); folds cycle 1..10 so every split is populated."""
    rng = np.random.default_rng(seed)
    labels = (rng.random(n_records) >= normal_fraction).astype(np.int64)
    folds = (np.arange(n_records) % 10) + 1
    records = [make_record(i + 1, int(labels[i]), fs, seconds, leads, seed, **kwargs)
               for i in range(n_records)]
    return records, labels, folds


def scp_codes_for(label, rng):
    if not label:
        return {"NORM": 100.0, "SR": 0.0}
    code = ABNORMAL_CODES[rng.integers(len(ABNORMAL_CODES))]
    return {code: 100.0, "SR": 0.0}


def write_ptbxl_like(root, n_records=40, seed=0, resolutions=(100,), leads=STANDARD_LEADS,
                     **kwargs):
    """Write a miniature PTB-XL tree (CSV + WFDB records) under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    labels = (rng.random(n_records) >= 0.45).astype(int)
    rows = []
    for i in range(n_records):
        ecg_id = i + 1
        names = {}
        for fs, suffix, folder in ((100, "lr", "records100"), (500, "hr", "records500")):
            rel = f"{folder}/{(ecg_id // 1000) * 1000:05d}/{ecg_id:05d}_{suffix}"
            names[fs] = rel
            if fs in resolutions:
                rec = make_record(ecg_id, int(labels[i]), fs=fs, leads=leads, seed=seed, **kwargs)
                write_record(root / rel, rec)
        rows.append({
            "ecg_id": ecg_id,
            "scp_codes": render_scp_codes(scp_codes_for(labels[i], rng)),
            "strat_fold": (i % 10) + 1,
            "filename_lr": names[100],
            "filename_hr": names[500],
        })
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "ptbxl_database.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return labels
