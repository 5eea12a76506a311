"""Experiment configuration and the train / adapt / evaluate pipeline.

The experiment config is one JSON object with sections ``data``, ``net``,
``loss``, ``fed``, ``adapt``, ``eval`` and ``ablate`` plus top-level
``output_dir`` and ``seed``. Every section and key is optional; missing
values take the defaults below. The top-level seed drives data generation,
weight initialisation and batch order, so sections carry no seeds of their own.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, federation, segnet, synthdata
from .adaptation import AdaptMode, adapt
from .federation import FedConfig
from .losses import ALL_TERMS, LossConfig, expand_terms
from .segnet import NetSpec

log = logging.getLogger(__name__)

TRACE_FIELDS = ("round", "client_id", "mean_loss", "lr")

# loss combinations of the default ablation; each entry applies to both variants
DEFAULT_LOSS_COMBINATIONS = (
    ("dice", "ce"),
    ("dice", "focal"),
    ("dice", "topk"),
    ("dice", "lovasz"),
    ("dice", "ce", "focal"),
    ("dice", "ce", "topk"),
    ("dice", "ce", "lovasz"),
)
# (client_iterations, global_rounds) at a fixed total of 400 iterations per client
DEFAULT_SCHEDULES = ((5, 80), (10, 40), (20, 20))


class ConfigError(ValueError):
    def __init__(self, where: str, message: str, line: int | None = None):
        self.where, self.line = where, line
        loc = f"line {line}: " if line else ""
        super().__init__(f"{loc}{where}: {message}")


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None  # dataset directory; None regenerates in memory
    n_test: int = 24
    size: int = 64
    sites: list | None = None  # SiteSpec dicts; None selects the five-site benchmark


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "FTB"
    epochs: int = 10
    lr: float = 0.001
    sites: list | None = None


@dataclass(frozen=True)
class EvalConfig:
    sites: list | None = None
    splits: list = ("test",)


@dataclass(frozen=True)
class AblateConfig:
    loss_combinations: list = DEFAULT_LOSS_COMBINATIONS
    schedules: list = DEFAULT_SCHEDULES


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetSpec = field(default_factory=lambda: NetSpec(num_classes=synthdata.NUM_CLASSES))
    loss: LossConfig = field(default_factory=LossConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    output_dir: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        net = asdict(self.net)
        net.pop("seed")
        fed = asdict(self.fed)
        fed.pop("seed")
        return {
            "data": _plain(asdict(self.data)),
            "net": net,
            "loss": self.loss.to_dict(),
            "fed": fed,
            "adapt": _plain(asdict(self.adapt)),
            "eval": _plain(asdict(self.eval)),
            "ablate": _plain(asdict(self.ablate)),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------- config parsing

SECTIONS = {
    "data": DataConfig,
    "net": NetSpec,
    "loss": LossConfig,
    "fed": FedConfig,
    "adapt": AdaptConfig,
    "eval": EvalConfig,
    "ablate": AblateConfig,
}
_NO_SEED = ("net", "fed")


def _line_of(text: str | None, section: str, key: str | None = None):
    """Best-effort line number of ``"key"`` inside ``"section"`` in the JSON source."""
    if not text:
        return None
    lines = text.splitlines()
    start = next((i for i, ln in enumerate(lines) if f'"{section}"' in ln), None)
    if start is None:
        return None
    if key is None:
        return start + 1
    for i in range(start, len(lines)):
        if f'"{key}"' in lines[i]:
            return i + 1
    return start + 1


def _check_type(value, default, where, line):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "string"
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        want = "list"
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
        want = "object"
    else:
        return value
    if not ok:
        raise ConfigError(where, f"expected {want}, got {type(value).__name__} {value!r}", line)
    return value


def _field_default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _build_section(name, raw, text, seed):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(name, "section must be a JSON object", _line_of(text, name))
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        line = _line_of(text, name, key)
        if key == "seed" and name in _NO_SEED:
            raise ConfigError(f"{name}.seed", "per-section seeds are not accepted; set the top-level seed", line)
        if key not in known:
            raise ConfigError(f"{name}.{key}", f"unknown field (expected one of {sorted(known)})", line)
        kwargs[key] = _check_type(value, _field_default(known[key]), f"{name}.{key}", line)
    if name == "net":
        kwargs.setdefault("num_classes", synthdata.NUM_CLASSES)
    if name in _NO_SEED:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc), _line_of(text, name)) from None


def parse_config(raw: dict | None = None, text: str | None = None, seed: int | None = None) -> ExperimentConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object", 1)
    for key in raw:
        if key not in SECTIONS and key not in ("output_dir", "seed"):
            raise ConfigError(key, f"unknown section (expected one of {sorted(SECTIONS) + ['output_dir', 'seed']})",
                              _line_of(text, key))
    top_seed = raw.get("seed", 0) if seed is None else seed
    _check_type(top_seed, 0, "seed", _line_of(text, "seed"))
    out_dir = _check_type(raw.get("output_dir", "runs"), "", "output_dir", _line_of(text, "output_dir"))
    parts = {name: _build_section(name, raw.get(name, {}), text, top_seed) for name in SECTIONS}
    cfg = ExperimentConfig(output_dir=out_dir, seed=top_seed, **parts)
    validate(cfg, text)
    return cfg


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config(None, None, seed)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    return parse_config(raw, text, seed)


def validate(cfg: ExperimentConfig, text=None) -> None:
    if cfg.net.num_classes != synthdata.NUM_CLASSES:
        raise ConfigError("net.num_classes", f"the synthetic label space has {synthdata.NUM_CLASSES} classes",
                          _line_of(text, "net", "num_classes"))
    step = 2 ** cfg.net.depth
    if cfg.data.size % step:
        raise ConfigError("data.size", f"must be divisible by 2^depth = {step}", _line_of(text, "data", "size"))
    try:
        AdaptMode(cfg.adapt.mode)
    except ValueError:
        raise ConfigError("adapt.mode", "must be one of FTA, FTB, FTC", _line_of(text, "adapt", "mode")) from None
    if cfg.adapt.epochs < 0 or cfg.adapt.lr < 0:
        raise ConfigError("adapt", "epochs and lr must be >= 0", _line_of(text, "adapt"))
    for split in cfg.eval.splits:
        if split not in ("train", "test"):
            raise ConfigError("eval.splits", f"unknown split {split!r}", _line_of(text, "eval", "splits"))
    if cfg.data.sites is not None:
        try:
            specs = [synthdata.SiteSpec.from_dict(d) for d in cfg.data.sites]
        except (TypeError, ValueError) as exc:
            raise ConfigError("data.sites", str(exc), _line_of(text, "data", "sites")) from None
        ids = [s.site_id for s in specs]
        if len(set(ids)) != len(ids):
            raise ConfigError("data.sites", "site ids must be unique", _line_of(text, "data", "sites"))
    ids = [s.site_id for s in site_specs(cfg)]
    for section in ("adapt", "eval"):
        for s in getattr(cfg, section).sites or []:
            if s not in ids:
                raise ConfigError(f"{section}.sites", f"unknown site {s!r}", _line_of(text, section, "sites"))
    for combo in cfg.ablate.loss_combinations:
        try:
            expand_terms(combo)
        except ValueError as exc:
            raise ConfigError("ablate.loss_combinations", f"{exc}; terms are {list(ALL_TERMS)}",
                              _line_of(text, "ablate", "loss_combinations")) from None
    totals = set()
    for sched in cfg.ablate.schedules:
        if len(sched) != 2 or any(not isinstance(v, int) or v < 1 for v in sched):
            raise ConfigError("ablate.schedules", f"entries are [client_iterations, global_rounds], got {sched!r}",
                              _line_of(text, "ablate", "schedules"))
        totals.add(sched[0] * sched[1])
    if len(totals) > 1:
        raise ConfigError("ablate.schedules", f"splits must share one total iteration count, got {sorted(totals)}",
                          _line_of(text, "ablate", "schedules"))


# ---------------------------------------------------------------- data

def site_specs(cfg: ExperimentConfig) -> list:
    if cfg.data.sites is None:
        return synthdata.default_site_specs(cfg.seed, cfg.data.n_test, cfg.data.size)
    return [synthdata.SiteSpec.from_dict(d) for d in cfg.data.sites]


def generate_sites(cfg: ExperimentConfig) -> list:
    return [synthdata.generate_site(s) for s in site_specs(cfg)]


def load_sites(cfg: ExperimentConfig) -> list:
    """Sites from ``data.root`` when set, otherwise regenerated from the specs."""
    if cfg.data.root is None:
        return generate_sites(cfg)
    try:
        return synthdata.load_benchmark(cfg.data.root)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset from {cfg.data.root}: {exc}") from None


def select_sites(sites, ids):
    if ids is None:
        return list(sites)
    by_id = {s.site_id: s for s in sites}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"sites not in dataset: {missing}")
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------- training

def init_model(cfg: ExperimentConfig):
    return segnet.init_params(cfg.net)


def make_clients(sites, cfg: ExperimentConfig, loss_cfg: LossConfig | None = None, fed: FedConfig | None = None):
    loss_cfg = loss_cfg or cfg.loss
    fed = fed or cfg.fed
    return [federation.make_client(s.site_id, s.train, loss_cfg, fed) for s in sites]


def train(cfg: ExperimentConfig, sites, mode: str, threads: int = 1, loss_cfg=None, fed=None):
    """Train one model; ``mode`` is ``federated``, ``central`` or ``local:<site>``.

    Returns (name, TrainResult, wall seconds).
    """
    fed = fed or cfg.fed
    init = init_model(cfg)
    t0 = time.perf_counter()
    if mode == "federated":
        name = "federated"
        res = federation.run_federated(make_clients(sites, cfg, loss_cfg, fed), fed, init, threads=threads)
    elif mode == "central":
        name = "central"
        res = federation.run_central(make_clients(sites, cfg, loss_cfg, fed), fed, init)
    elif mode.startswith("local:"):
        site = mode.split(":", 1)[1]
        (chosen,) = select_sites(sites, [site])
        name = f"local_{site}"
        res = federation.run_local(make_clients([chosen], cfg, loss_cfg, fed)[0], fed, init)
    else:
        raise ValueError(f"unknown training mode {mode!r}")
    return name, res, time.perf_counter() - t0


def adapt_sites(cfg: ExperimentConfig, fed_params, sites, mode: str | None = None):
    """Per-site adapted copies of ``fed_params``: {site_id: params}."""
    mode = AdaptMode(mode or cfg.adapt.mode)
    out = {}
    for s in select_sites(sites, cfg.adapt.sites):
        out[s.site_id] = adapt(fed_params, s.train, mode, cfg.adapt.epochs, cfg.adapt.lr, cfg.loss,
                               batch_size=cfg.fed.batch_size, seed=cfg.seed)
    return out


def evaluate(params, sites, split: str = "test", experiment: str = "", wall_time_s=None):
    rows = []
    for s in sites:
        rows += evaluation.evaluate_site(params, s, split, experiment, wall_time_s)
    return rows


def evaluate_ground_truth(sites, split: str = "test", experiment: str = "ground_truth"):
    rows = []
    for s in sites:
        ds = s.split(split)
        rows += evaluation.evaluate_site(None, s, split, experiment, pred_maps=ds.full_masks)
    return rows


def ablate_losses(cfg: ExperimentConfig, sites, split: str = "test"):
    """Central models, one per loss combination."""
    rows = []
    for combo in cfg.ablate.loss_combinations:
        terms = expand_terms(combo)
        loss_cfg = LossConfig(**{**cfg.loss.to_dict(), "active_terms": terms})
        label = "+".join(combo)
        log.info("ablate-losses: %s", label)
        _, res, secs = train(cfg, sites, "central", loss_cfg=loss_cfg)
        rows += evaluate(res.params, sites, split, label, secs)
    return rows


def ablate_schedule(cfg: ExperimentConfig, sites, split: str = "test", threads: int = 1):
    """Federated models over (client_iterations, global_rounds) splits of one budget."""
    rows = []
    for n_iter, rounds in cfg.ablate.schedules:
        fed = replace(cfg.fed, client_iterations=n_iter, global_rounds=rounds)
        label = f"iter{n_iter}_rounds{rounds}"
        log.info("ablate-schedule: %s", label)
        _, res, secs = train(cfg, sites, "federated", threads=threads, fed=fed)
        rows += evaluate(res.params, sites, split, label, secs)
    return rows


# ---------------------------------------------------------------- outputs

def write_trace(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for rnd, cid, loss, lr in trace:
            w.writerow([rnd, cid, repr(float(loss)), repr(float(lr))])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["round"]), r["client_id"], float(r["mean_loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


def write_resolved_config(cfg: ExperimentConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def mean_dc_by_site(rows) -> dict:
    sites = sorted({r.site for r in rows})
    return {s: float(np.mean([r.dc for r in rows if r.site == s])) for s in sites}
