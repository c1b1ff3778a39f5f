"""``ecglite`` command line: ingest, preprocess, train, quantize, evaluate, infer, report.

Every subcommand reads the same INI config (``--config``) with
``--set section.key=value`` overrides and writes into the output directory.
Exit status is 0 on success, 1 on a pipeline failure and 2 on a usage or
configuration error.
"""
import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import DATASET_ENV, default_leads_for, load_config
from .dsp import preprocess_record, low_band_fraction, spectrogram_axes, stft_spectrogram
from .errors import ConfigError, EcgliteError, ShapeError, UnlabeledRecord
from .eval import (bar_chart_svg, compute_metrics, confusion_csv, confusion_matrix, confusion_svg,
                   line_chart_svg, metrics_csv)
from .labels import Superclass, binary_of, compute_class_weights, select_superclass
from .model_format import F16, load_model, peek_dtype, save_model
from .nn import history_csv, predict, save_checkpoint, train_model
from .wfdb_ingest import load_index, read_record, split_folds

log = logging.getLogger("ecglite")

MANIFEST = "manifest.json"
PREPROCESS_INDEX = "preprocess.json"
CACHE_DIR = "cache"


# --- small helpers ------------------------------------------------------------------

def _write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path} (run the earlier pipeline step first)")
    return json.loads(path.read_text())


def _sha_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_manifest(cfg, command, outputs):
    """Record config hash, seeds and output checksums; no timestamps."""
    body = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.digest(),
        "seeds": {"seed": cfg.seed, "init_seed": cfg.train.init_seed,
                  "shuffle_seed": cfg.train.shuffle_seed},
        "config": cfg.to_dict(),
        "outputs": {Path(p).name: _sha_file(p) for p in outputs},
    }
    _write(cfg.out / f"run_{command}.json", _dump_json(body))


def _dataset_root(cfg):
    if not cfg.dataset_root:
        raise ConfigError(f"pipeline.dataset_root is not set (use --dataset-root or ${DATASET_ENV})")
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise ConfigError(f"pipeline.dataset_root: directory does not exist: {root}")
    return root


def cache_key(ecg_id, resolution, preprocess):
    """Cache file stem for one conditioned record."""
    blob = f"{int(ecg_id)}|{int(resolution)}|{preprocess.digest()}".encode()
    return hashlib.sha256(blob).hexdigest()[:24]


# --- ingest ----------------------------------------------------------------------------

def cmd_ingest(cfg, args):
    root = _dataset_root(cfg)
    csv_path = root / "ptbxl_database.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"metadata file not found: {csv_path}")
    index = load_index(csv_path.read_text())
    labels, superclasses, files, skipped = {}, {}, {}, []
    for row in index:
        try:
            sc = select_superclass(row.scp_codes)
        except UnlabeledRecord as exc:
            log.warning("ecg_id %d skipped: %s", row.ecg_id, exc)
            skipped.append(row.ecg_id)
            continue
        labels[str(row.ecg_id)] = binary_of(sc)
        superclasses[str(row.ecg_id)] = sc.value
        files[str(row.ecg_id)] = row.filename(cfg.resolution)
    splits = {k: [i for i in v if str(i) in labels] for k, v in split_folds(index).items()}
    manifest = {
        "dataset_root": str(root),
        "resolution": cfg.resolution,
        "leads": list(cfg.leads),
        "n_channels": len(cfg.leads),
        "splits": splits,
        "labels": labels,
        "superclasses": superclasses,
        "files": files,
        "skipped": skipped,
    }
    path = cfg.out / MANIFEST
    _write(path, _dump_json(manifest))
    print(f"manifest: {len(labels)} records ({len(splits['train'])} train, {len(splits['val'])} val, "
          f"{len(splits['test'])} test), {len(skipped)} skipped, {len(cfg.leads)} channels -> {path}")
    return [path]


# --- preprocess ------------------------------------------------------------------------

def _preprocess_one(job):
    """Worker: condition one record and write its cache file. Returns an index entry."""
    ecg_id, src, dst, pre, resolution = job
    try:
        rec = read_record(src, ecg_id=ecg_id)
        if int(round(rec.sampling_rate)) != resolution:
            raise ShapeError(f"record is sampled at {rec.sampling_rate} Hz, expected {resolution}")
        out = preprocess_record(rec, pre)
    except (EcgliteError, OSError) as exc:
        return {"ecg_id": ecg_id, "status": "error", "reason": f"{type(exc).__name__}: {exc}"}
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(out.samples, dtype=np.float64))
    _write(dst, buf.getvalue())
    fractions = {lead: round(low_band_fraction(row, rec.sampling_rate, pre), 12)
                 for lead, row in zip(out.lead_names, out.samples)}
    return {"ecg_id": ecg_id, "status": "ok", "file": Path(dst).name, "leads": list(out.lead_names),
            "n_samples": out.n_samples, "invalid_samples": rec.invalid_samples,
            "low_band_fraction": fractions}


def cmd_preprocess(cfg, args):
    manifest = _read_json(cfg.out / MANIFEST, "manifest")
    root = Path(manifest["dataset_root"])
    if manifest["resolution"] != cfg.resolution:
        raise ConfigError(f"pipeline.resolution={cfg.resolution} but the manifest was built at "
                          f"{manifest['resolution']} Hz; re-run ingest")
    cache = cfg.out / CACHE_DIR
    cache.mkdir(parents=True, exist_ok=True)
    ids = sorted(int(i) for i in manifest["labels"])
    jobs = [(i, root / manifest["files"][str(i)],
             cache / f"{cache_key(i, cfg.resolution, cfg.preprocess)}.npy",
             cfg.preprocess, cfg.resolution) for i in ids]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            entries = list(pool.map(_preprocess_one, jobs, chunksize=8))
    else:
        entries = [_preprocess_one(j) for j in jobs]
    errors = [e for e in entries if e["status"] == "error"]
    for e in errors:
        log.warning("ecg_id %d not cached: %s", e["ecg_id"], e["reason"])
    index = {"preprocess": cfg.to_dict()["preprocess"], "preprocess_digest": cfg.preprocess.digest(),
             "resolution": cfg.resolution,
             "records": {str(e["ecg_id"]): e for e in entries}}
    path = cfg.out / PREPROCESS_INDEX
    _write(path, _dump_json(index))
    print(f"preprocess: {len(entries) - len(errors)} cached, {len(errors)} failed -> {cache}")
    return [path]


def _load_split(cfg, split, leads, input_length):
    """Stack cached records of ``split`` for ``leads``; quality-gated records are left out."""
    manifest = _read_json(cfg.out / MANIFEST, "manifest")
    index = _read_json(cfg.out / PREPROCESS_INDEX, "preprocess index")
    if index["preprocess_digest"] != cfg.preprocess.digest():
        raise ConfigError("preprocess settings differ from the cached ones; re-run preprocess")
    xs, ys, dropped = [], [], {}
    for ecg_id in manifest["splits"][split]:
        entry = index["records"].get(str(ecg_id))
        if entry is None or entry["status"] != "ok":
            dropped[ecg_id] = "not cached"
            continue
        missing = [lead for lead in leads if lead not in entry["leads"]]
        if missing:
            dropped[ecg_id] = f"missing leads {missing}"
            continue
        bad = [lead for lead in leads
               if entry["low_band_fraction"][lead] > cfg.preprocess.quality_threshold]
        if bad:
            dropped[ecg_id] = f"quality gate on lead {bad[0]}"
            continue
        if entry["n_samples"] != input_length:
            dropped[ecg_id] = f"{entry['n_samples']} samples, model expects {input_length}"
            continue
        arr = np.load(cfg.out / CACHE_DIR / entry["file"])
        xs.append(arr[[entry["leads"].index(lead) for lead in leads]])
        ys.append(int(manifest["labels"][str(ecg_id)]))
    for ecg_id, why in dropped.items():
        log.info("%s: ecg_id %d dropped (%s)", split, ecg_id, why)
    x = np.stack(xs) if xs else np.zeros((0, len(leads), input_length))
    return x, np.array(ys, dtype=np.int64), dropped


# --- train / quantize ------------------------------------------------------------------

def cmd_train(cfg, args):
    mc = cfg.model
    x, y, _ = _load_split(cfg, "train", cfg.leads, mc.input_length)
    if len(x) == 0:
        raise EcgliteError("no usable training records")
    val = _load_split(cfg, "val", cfg.leads, mc.input_length)[:2]
    weights = compute_class_weights(y)
    tc = cfg.train
    tc.class_weights = weights

    def progress(row):
        print(f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}  "
              f"val_loss {row['val_loss']:.4f}  val_acc {row['val_accuracy']:.4f}")

    params, history, state = train_model((x, y), val, mc, tc, callback=progress)
    model_path = Path(args.model) if args.model else cfg.out / "model.ecgm"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model_path, mc, params)
    side = _sidecars(model_path)
    _write(side["history"], history_csv(history))
    save_checkpoint(side["checkpoint"], mc, params, state, history)
    _write(side["class_weights"], _dump_json(
        {"normal": weights.weight_normal, "abnormal": weights.weight_abnormal}))
    print(f"model: {params.n_trainable(mc)} trainable parameters, leads {','.join(cfg.leads)} "
          f"-> {model_path}")
    return [model_path, side["history"], side["checkpoint"], side["class_weights"]]


def _sidecars(model_path):
    """Files written next to a trained model, named after its stem."""
    stem = model_path.with_suffix("")
    return {"history": Path(f"{stem}.history.csv"), "checkpoint": Path(f"{stem}.checkpoint.npz"),
            "class_weights": Path(f"{stem}.class_weights.json")}


def _model_path(cfg, args, default="model.ecgm"):
    path = Path(args.model) if getattr(args, "model", None) else cfg.out / default
    return _existing_model(path)


def _existing_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return path


def cmd_quantize(cfg, args):
    src = _model_path(cfg, args)
    mc, params = load_model(src)
    dst = Path(args.output) if args.output else src.with_name(src.stem + "_f16.ecgm")
    save_model(dst, mc, params, F16)
    print(f"quantized {src} ({src.stat().st_size} bytes) -> {dst} ({dst.stat().st_size} bytes)")
    return [dst]


# --- evaluate / infer ----------------------------------------------------------------

def _leads_for_model(cfg, args, mc, path):
    """Configured leads when given explicitly, else the standard subset of the model's width."""
    explicit = args.leads or any(o.startswith("pipeline.leads=") for o in args.set)
    leads = cfg.leads if explicit else default_leads_for(mc.in_channels)
    if len(leads) != mc.in_channels:
        raise ConfigError(f"model at {path} takes {mc.in_channels} channels but "
                          f"{len(leads)} leads are configured (pipeline.leads)")
    return leads


def cmd_evaluate(cfg, args):
    paths = [_existing_model(p) for p in (args.model or [cfg.out / "model.ecgm"])]
    outputs, rows = [], []
    for path in paths:
        mc, params = load_model(path)
        leads = _leads_for_model(cfg, args, mc, path)
        x, y, _ = _load_split(cfg, args.split, leads, mc.input_length)
        probs = predict(mc, params, x, dtype=np.float32) if len(x) else np.zeros(0)
        cm = confusion_matrix(probs, y)
        m = compute_metrics(cm)
        rows.append((mc.in_channels, params.n_trainable(mc), m))
        stem = path.parent / f"{path.stem}.{args.split}"
        files = [Path(f"{stem}.metrics.csv"), Path(f"{stem}.confusion.csv"),
                 Path(f"{stem}.confusion.svg")]
        _write(files[0], metrics_csv(rows[-1:]))
        _write(files[1], confusion_csv(cm))
        _write(files[2], confusion_svg(cm, f"{path.name} ({args.split}, {cm.total} records)"))
        outputs += files
        print(f"{path.name} [{peek_dtype(path.read_bytes())}, {len(leads)} leads] on {args.split}: "
              f"accuracy {m.accuracy:.2f}%  precision {m.precision:.2f}%  recall {m.recall:.2f}%  "
              f"f1 {m.f1:.2f}%")
        if m.degenerate:
            log.warning("%s: degenerate metrics (0/0): %s", path.name, ", ".join(m.degenerate))
    if len(paths) > 1:
        outputs.append(cfg.out / f"metrics.{args.split}.csv")
        _write(outputs[-1], metrics_csv(rows))
    return outputs


def cmd_infer(cfg, args):
    path = _model_path(cfg, args)
    mc, params = load_model(path)
    leads = _leads_for_model(cfg, args, mc, path)
    record_path = Path(args.record)
    if not record_path.with_suffix(".hea").is_file():
        raise FileNotFoundError(f"record header not found: {record_path.with_suffix('.hea')}")
    rec = read_record(record_path).select_leads(leads)
    if rec.n_samples != mc.input_length:
        raise ShapeError(f"record has {rec.n_samples} samples, model expects {mc.input_length}")
    x = preprocess_record(rec, cfg.preprocess).samples[None]
    p = float(predict(mc, params, x, dtype=np.float32)[0])
    label = "abnormal" if p >= 0.5 else "normal"
    print(f"probability={p:.6f} class={label}")
    return []


# --- report ------------------------------------------------------------------------------

def cmd_report(cfg, args):
    out = cfg.out
    manifest = _read_json(out / MANIFEST, "manifest")
    outputs = []

    counts = {sc.value: 0 for sc in Superclass}
    for sc in manifest["superclasses"].values():
        counts[sc] += 1
    binary = {"normal": 0, "abnormal": 0}
    for v in manifest["labels"].values():
        binary["abnormal" if v else "normal"] += 1
    outputs.append(out / "label_distribution.svg")
    _write(outputs[-1], bar_chart_svg(counts, "Records per superclass"))
    outputs.append(out / "binary_distribution.svg")
    _write(outputs[-1], bar_chart_svg(binary, "Normal vs abnormal"))

    index_path = out / PREPROCESS_INDEX
    if index_path.is_file():
        index = json.loads(index_path.read_text())
        ok = sorted((int(k), e) for k, e in index["records"].items() if e["status"] == "ok")
        if ok:
            ecg_id, entry = ok[0] if args.record is None else next(
                ((i, e) for i, e in ok if i == args.record), (None, None))
            if entry is None:
                raise EcgliteError(f"ecg_id {args.record} is not in the preprocess cache")
            lead = args.lead if args.lead else cfg.leads[0]
            if lead not in entry["leads"]:
                raise ConfigError(f"lead {lead} is not in cached record {ecg_id}")
            row = np.load(out / CACHE_DIR / entry["file"])[entry["leads"].index(lead)]
            fs = index["resolution"]
            window = min(args.window, len(row))
            spec = stft_spectrogram(row, fs, window, max(1, window // 2))
            freqs, times = spectrogram_axes(len(row), fs, window, max(1, window // 2))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["freq_hz"] + [f"{t:.4f}" for t in times])
            for f, vals in zip(freqs, spec):
                w.writerow([f"{f:.4f}"] + [f"{v:.4f}" for v in vals])
            outputs.append(out / f"spectrogram_{ecg_id}_{lead}.csv")
            _write(outputs[-1], buf.getvalue())

    for hist_path in sorted(out.glob("*.history.csv")):
        rows = list(csv.DictReader(io.StringIO(hist_path.read_text())))
        series = {k: [float(r[k]) for r in rows] for k in ("train_loss", "val_loss", "val_accuracy")}
        name = hist_path.name[: -len(".csv")]
        outputs.append(out / f"{name}.svg")
        _write(outputs[-1], line_chart_svg(series, f"Training history ({name.split('.')[0]})"))
    for p in outputs:
        print(f"wrote {p}")
    return outputs


COMMANDS = {
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--dataset-root", help=f"PTB-XL root (fallback: ${DATASET_ENV})")
    common.add_argument("--leads", help="I, I-III, limb, all, or a comma list of leads")
    common.add_argument("--resolution", type=int, choices=(100, 500))
    common.add_argument("-o", "--output-dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ecglite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ecglite {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    sub.add_parser("ingest", parents=[common], help="build the fold-split manifest")
    sub.add_parser("preprocess", parents=[common], help="condition records into the cache")
    p = sub.add_parser("train", parents=[common], help="fit the CNN and write model.ecgm")
    p.add_argument("--model", help="output model path (default: OUTPUT_DIR/model.ecgm)")
    p = sub.add_parser("quantize", parents=[common], help="rewrite a model at float16")
    p.add_argument("--model")
    p.add_argument("--output")
    p = sub.add_parser("evaluate", parents=[common], help="metrics CSV and confusion matrix")
    p.add_argument("--model", action="append",
                   help="model to score (repeatable; several give one combined table)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p = sub.add_parser("infer", parents=[common], help="score one WFDB record")
    p.add_argument("--model", required=True)
    p.add_argument("record", help="record path (with or without .hea)")
    p = sub.add_parser("report", parents=[common], help="spectrogram, label and history figures")
    p.add_argument("--record", type=int, help="ecg_id for the spectrogram (default: lowest cached)")
    p.add_argument("--lead", help="lead for the spectrogram (default: first configured lead)")
    p.add_argument("--window", type=int, default=256)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, dataset_root=args.dataset_root, leads=args.leads,
                          output_dir=args.output_dir, resolution=args.resolution, seed=args.seed,
                          workers=args.workers)
        outputs = COMMANDS[args.command](cfg, args)
        if args.command != "infer":
            _run_manifest(cfg, args.command, outputs)
    except ConfigError as exc:
        print(f"ecglite: configuration error: {exc}", file=sys.stderr)
        return 2
    except (EcgliteError, OSError, ValueError) as exc:
        print(f"ecglite {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
