"""Experiment configuration: INI files with sections grid, media, gpc, dybo, online, output."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from math import comb
from pathlib import Path

from .media import TRIG_VARIANTS


class ConfigError(ValueError):
    """Invalid configuration; the message names the section and key."""


@dataclass
class GridConfig:
    n_coarse: int = 10
    n_fine_per_coarse: int = 10


@dataclass
class MediaConfig:
    mean: str = "high-contrast"  # high-contrast | constant | raster
    n_channels: int = 3
    background: float = 4.0
    contrast: float = 1000.0
    seed: int = 7
    raster_path: str = ""
    raster_scale: float = 1.0
    fluctuations: str = "example1"  # example1 | example2 | none | custom
    custom: str = ""  # "amp P eps variant; ..." when fluctuations = custom


@dataclass
class GpcConfig:
    r: int = 3
    p: int = 2


@dataclass
class DyboConfig:
    m: int = 4
    dt: float = 1e-3
    T: float = 1.0
    recast_stride: int = 20
    increment_limit: str = "auto"
    space: str = "multiscale"  # multiscale | fine
    initial: str = "example1"  # example1 | example2
    f: float = 1.0


@dataclass
class OnlineConfig:
    enabled: bool = True
    l_per_node: int = 4
    theta: float = 0.05
    max_rounds: int = 5
    keep_bases: bool = False
    residual_source: str = "coarse"


@dataclass
class OutputConfig:
    directory: str = "runs/out"
    report_times: list = field(default_factory=lambda: [0.1, 0.2, 0.4, 0.8, 1.0])
    reference: str = "fine-dybo"  # fine-dybo | gpc-galerkin | none
    snapshot_stride: int = 0
    cache_dir: str = ""


SECTIONS = {
    "grid": GridConfig,
    "media": MediaConfig,
    "gpc": GpcConfig,
    "dybo": DyboConfig,
    "online": OnlineConfig,
    "output": OutputConfig,
}
# sections that define the mathematical problem (hashed to match runs)
PROBLEM_SECTIONS = ("grid", "media", "gpc", "dybo")


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    media: MediaConfig = field(default_factory=MediaConfig)
    gpc: GpcConfig = field(default_factory=GpcConfig)
    dybo: DyboConfig = field(default_factory=DyboConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: str = ""

    def as_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def problem_dict(self) -> dict:
        d = self.as_dict()
        out = {k: d[k] for k in PROBLEM_SECTIONS}
        # the space choice does not change the problem being approximated
        out["dybo"] = {k: v for k, v in out["dybo"].items() if k != "space"}
        return out

    @property
    def n_steps(self) -> int:
        return int(round(self.dybo.T / self.dybo.dt))


def _convert(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(eval_fraction(raw))
        if isinstance(default, list):
            return [float(eval_fraction(t)) for t in raw.replace(",", " ").split()]
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def eval_fraction(text: str) -> float:
    """Parse ``"0.1"``, ``"1e-3"`` or a simple fraction such as ``"1/80"``."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_parser(parser, source=str(path))


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return config_from_parser(parser)


def config_from_parser(parser: configparser.ConfigParser, source: str = "") -> ExperimentConfig:
    cfg = ExperimentConfig(source=source)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        obj = getattr(cfg, section)
        defaults = asdict(obj)
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"[{section}] {key}: unknown key")
            setattr(obj, key, _convert(section, key, raw, defaults[key]))
    validate(cfg)
    return cfg


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    g, md, gp, d, on, out = cfg.grid, cfg.media, cfg.gpc, cfg.dybo, cfg.online, cfg.output
    _require(g.n_coarse >= 2, "[grid] n_coarse", "must be >= 2")
    _require(g.n_fine_per_coarse >= 2, "[grid] n_fine_per_coarse", "must be >= 2")
    _require(md.mean in ("high-contrast", "constant", "raster"), "[media] mean",
             "must be high-contrast, constant or raster")
    _require(md.background > 0, "[media] background", "must be positive")
    if md.mean == "high-contrast":
        _require(md.contrast > md.background, "[media] contrast", "must exceed background")
    if md.mean == "raster":
        _require(bool(md.raster_path), "[media] raster_path", "required when mean = raster")
    _require(md.fluctuations in ("example1", "example2", "none", "custom"), "[media] fluctuations",
             "must be example1, example2, none or custom")
    if md.fluctuations == "custom":
        parse_custom(md.custom)
    _require(gp.r >= 1, "[gpc] r", "must be >= 1")
    _require(gp.p >= 1, "[gpc] p", "must be >= 1")
    r_expected = {"example1": 3, "example2": 4, "none": None,
                  "custom": len(parse_custom(md.custom)) if md.fluctuations == "custom" else None}[md.fluctuations]
    if r_expected is not None:
        _require(gp.r == r_expected, "[gpc] r", f"must equal the number of fluctuation fields ({r_expected})")
    _require(d.m >= 1, "[dybo] m", "must be >= 1 (DyBO needs at least one mode)")
    n_init = {"example1": 4, "example2": 3}.get(d.initial, 4)
    _require(d.m <= n_init, "[dybo] m", f"initial data {d.initial!r} defines only {n_init} modes")
    _require(d.m <= comb(gp.p + gp.r, gp.r) - 1, "[dybo] m", "must not exceed N_p")
    _require(d.dt > 0, "[dybo] dt", "must be positive")
    _require(d.T > 0, "[dybo] T", "must be positive")
    _require(abs(d.T / d.dt - round(d.T / d.dt)) < 1e-9 * max(1.0, d.T / d.dt), "[dybo] T",
             "must be an integer multiple of dt")
    _require(d.recast_stride >= 0, "[dybo] recast_stride", "must be >= 0")
    if d.increment_limit not in ("auto", "none"):
        try:
            _require(float(d.increment_limit) > 0, "[dybo] increment_limit", "must be positive")
        except ValueError:
            raise ConfigError("[dybo] increment_limit: must be auto, none or a positive number") from None
    _require(d.space in ("multiscale", "fine"), "[dybo] space", "must be multiscale or fine")
    _require(d.initial in ("example1", "example2"), "[dybo] initial", "must be example1 or example2")
    _require(on.l_per_node >= 1, "[online] l_per_node", "must be >= 1")
    _require(on.l_per_node < 8 * g.n_fine_per_coarse, "[online] l_per_node",
             "must be smaller than the snapshot count")
    _require(on.theta > 0, "[online] theta", "must be positive")
    _require(on.max_rounds >= 0, "[online] max_rounds", "must be >= 0")
    _require(on.residual_source in ("coarse", "fine"), "[online] residual_source", "must be coarse or fine")
    _require(out.reference in ("fine-dybo", "gpc-galerkin", "none"), "[output] reference",
             "must be fine-dybo, gpc-galerkin or none")
    for t in out.report_times:
        _require(0 < t <= d.T + 1e-12, "[output] report_times", f"time {t} outside (0, T]")
        _require(abs(t / d.dt - round(t / d.dt)) < 1e-6, "[output] report_times", f"time {t} is not a multiple of dt")
    _require(out.snapshot_stride >= 0, "[output] snapshot_stride", "must be >= 0")
    return cfg


def parse_custom(text: str) -> list:
    """``"amp P eps variant; ..."`` -> list of trig field specs."""
    specs = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        parts = item.split()
        if len(parts) != 4:
            raise ConfigError(f"[media] custom: expected 'amp P eps variant', got {item!r}")
        try:
            amp, P, eps = (eval_fraction(x) for x in parts[:3])
        except ValueError:
            raise ConfigError(f"[media] custom: non-numeric entry in {item!r}") from None
        if parts[3] not in TRIG_VARIANTS:
            raise ConfigError(f"[media] custom: unknown variant {parts[3]!r}")
        specs.append((amp, P, eps, parts[3]))
    if not specs:
        raise ConfigError("[media] custom: no fluctuation fields given")
    return specs


def write_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, values in cfg.as_dict().items():
        parser[name] = {k: " ".join(repr(x) for x in v) if isinstance(v, list) else str(v)
                        for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)
