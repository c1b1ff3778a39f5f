"""Pipeline configuration: one INI file plus ``section.key=value`` overrides."""
import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import PreprocessConfig
from .errors import ConfigError
from .nn.model import ModelConfig
from .nn.train import TrainConfig
from .wfdb_ingest import STANDARD_LEADS

DATASET_ENV = "ECGLITE_DATASET_ROOT"

LEAD_SETS = {
    "I": ("I",),
    "1": ("I",),
    "I-III": ("I", "II", "III"),
    "3": ("I", "II", "III"),
    "limb": ("I", "II", "III", "AVL", "AVR", "AVF"),
    "6": ("I", "II", "III", "AVL", "AVR", "AVF"),
    "all": STANDARD_LEADS,
    "12": STANDARD_LEADS,
}


def resolve_leads(spec):
    """Named subset (I, I-III, limb, all, or 1/3/6/12) or a comma list of leads."""
    if isinstance(spec, (list, tuple)):
        leads = [str(v).strip().upper() for v in spec]
    else:
        spec = str(spec).strip()
        if spec in LEAD_SETS or spec.lower() in LEAD_SETS:
            return list(LEAD_SETS.get(spec, LEAD_SETS.get(spec.lower())))
        leads = [v.strip().upper() for v in spec.split(",") if v.strip()]
    if not leads:
        raise ConfigError("pipeline.leads: lead subset is empty")
    bad = [v for v in leads if v not in STANDARD_LEADS]
    if bad:
        raise ConfigError(f"pipeline.leads: unknown leads {bad}; choose from {list(STANDARD_LEADS)}")
    if len(set(leads)) != len(leads):
        raise ConfigError("pipeline.leads: duplicate leads")
    return leads


def default_leads_for(n_channels):
    for leads in (LEAD_SETS["I"], LEAD_SETS["3"], LEAD_SETS["6"], STANDARD_LEADS):
        if len(leads) == n_channels:
            return list(leads)
    raise ConfigError(f"no standard lead subset has {n_channels} channels; set pipeline.leads")


@dataclass
class PipelineConfig:
    dataset_root: str = ""
    resolution: int = 100
    leads: list = field(default_factory=lambda: list(STANDARD_LEADS))
    output_dir: str = "ecglite-out"
    seed: int = 0
    workers: int = 1
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = None
    train: TrainConfig = None

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig(in_channels=len(self.leads),
                                     input_length=int(self.resolution) * 10)
        if self.train is None:
            self.train = TrainConfig(shuffle_seed=self.seed, init_seed=self.seed)

    @property
    def out(self):
        return Path(self.output_dir)

    def to_dict(self):
        train = dataclasses.asdict(self.train)
        train.pop("class_weights", None)
        return {
            "pipeline": {"dataset_root": self.dataset_root, "resolution": self.resolution,
                         "leads": list(self.leads), "output_dir": self.output_dir,
                         "seed": self.seed, "workers": self.workers},
            "preprocess": dataclasses.asdict(self.preprocess),
            "model": self.model.to_dict(),
            "train": train,
        }

    def digest(self):
        d = self.to_dict()
        d["pipeline"].pop("output_dir")
        d["pipeline"].pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _convert(section, key, raw, target):
    where = f"{section}.{key}"
    raw = raw.strip()
    try:
        if target is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        if target is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {target.__name__}") from None


_SECTION_TYPES = {
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
_PIPELINE_FIELDS = {"dataset_root": str, "resolution": int, "leads": str,
                    "output_dir": str, "seed": int, "workers": int}


def _field_types(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "class_weights":
            continue
        default = f.default
        out[f.name] = tuple if isinstance(default, tuple) else type(default)
    return out


def load_config(path=None, overrides=(), **flags):
    """Build a :class:`PipelineConfig`.

    ``overrides`` are ``section.key=value`` strings applied after the file;
    keyword ``flags`` (dataset_root, leads, output_dir, resolution, seed)
    win over both when not None.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    errors = []
    unknown_sections = set(parser.sections()) - {"pipeline"} - set(_SECTION_TYPES)
    for s in sorted(unknown_sections):
        errors.append(f"unknown section [{s}]")

    pipe = {}
    if parser.has_section("pipeline"):
        for key, raw in parser.items("pipeline"):
            if key not in _PIPELINE_FIELDS:
                errors.append(f"pipeline.{key}: unknown key")
                continue
            try:
                pipe[key] = _convert("pipeline", key, raw, _PIPELINE_FIELDS[key])
            except ConfigError as exc:
                errors.append(str(exc))
    for key in ("dataset_root", "leads", "output_dir", "resolution", "seed", "workers"):
        if flags.get(key) is not None:
            pipe[key] = flags[key]

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        types = _field_types(cls)
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in types:
                    errors.append(f"{name}.{key}: unknown key")
                    continue
                try:
                    values[key] = _convert(name, key, raw, types[key])
                except ConfigError as exc:
                    errors.append(str(exc))
        sections[name] = values
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))

    try:
        resolution = int(pipe.get("resolution", 100))
        if resolution not in (100, 500):
            raise ConfigError(f"pipeline.resolution: must be 100 or 500, got {resolution}")
        leads = resolve_leads(pipe.get("leads", "all"))
        seed = int(pipe.get("seed", 0))
        workers = int(pipe.get("workers", 1))
        if workers < 1:
            raise ConfigError("pipeline.workers: must be >= 1")
        root = pipe.get("dataset_root") or os.environ.get(DATASET_ENV, "")
        pre = PreprocessConfig(**sections["preprocess"])
        if pre.rolling_window < 1:
            raise ConfigError("preprocess.rolling_window: must be >= 1")
        if not 0 < pre.lowpass_cutoff_hz < resolution / 2:
            raise ConfigError(
                f"preprocess.lowpass_cutoff_hz: {pre.lowpass_cutoff_hz} Hz is not below "
                f"Nyquist at {resolution} Hz")
        model_kw = {"in_channels": len(leads), "input_length": resolution * 10}
        model_kw.update(sections["model"])
        if model_kw["in_channels"] != len(leads):
            raise ConfigError(
                f"model.in_channels={model_kw['in_channels']} but {len(leads)} leads are selected")
        model = ModelConfig(**model_kw)
        train_kw = {"shuffle_seed": seed, "init_seed": seed, "bn_eps": model.bn_eps}
        train_kw.update(sections["train"])
        train = TrainConfig(**train_kw)
    except ConfigError:
        raise
    except Exception as exc:  # dataclass validation of user-provided values
        raise ConfigError(f"invalid configuration: {exc}") from None

    return PipelineConfig(root, resolution, leads, pipe.get("output_dir", "ecglite-out"),
                          seed, workers, pre, model, train)


def render_config(cfg):
    """INI text equivalent to ``cfg`` (used for ``ecglite config --dump``)."""
    d = cfg.to_dict()
    lines = []
    for section, values in d.items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
