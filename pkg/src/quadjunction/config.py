"""Experiment configuration (TOML) with load-time validation."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

import tomli_w

from .errors import ValidationError


@dataclass
class WeightsConfig:
    mode: str = "explicit"  # "explicit" or "from-potential"
    c: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])


@dataclass
class DomainConfig:
    r_star: float = 0.25
    lam: float | None = None
    eta: float | None = None
    x_bar: float | None = None
    dims: int = 64


@dataclass
class PotentialConfig:
    well_scale: float = 1.0
    normalization: float = 1.0
    wells: list | None = None


@dataclass
class MetricConfig:
    lattice: int = 33
    samples: int = 65


@dataclass
class RelaxConfig:
    epsilons: list = field(default_factory=lambda: [4.0])  # in units of h
    dt_factor: float = 0.5
    tol: float | None = None
    max_iter: int = 200_000
    mollify: bool = False


@dataclass
class VerifyConfig:
    C0: float = 0.1
    radii: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    volume_budget: float = 0.02  # fraction of the domain volume
    probe_tolerance: float = 1e-3  # relative to E0 of the cone partition
    shift: float = 2.0  # plane translation, voxels
    ball: float = 4.0  # competitor ball radius, voxels
    calibration_tolerance: float = 0.02


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "run"
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    source: str = field(default="<defaults>", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["domain"]["lambda"] = d["domain"].pop("lam")
        return _drop_none(d)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


SECTIONS = {
    "weights": WeightsConfig,
    "domain": DomainConfig,
    "potential": PotentialConfig,
    "metric": MetricConfig,
    "relax": RelaxConfig,
    "verify": VerifyConfig,
}
_RENAMES = {("domain", "lambda"): "lam"}


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


class _Locator:
    """Maps (section, key) to a 'file:line' string for error messages."""

    def __init__(self, source, text):
        self.source = source
        self.lines = text.splitlines()

    def __call__(self, section, key=None):
        current = None
        for n, line in enumerate(self.lines, 1):
            s = line.strip()
            m = re.match(r"\[([^\]]+)\]", s)
            if m:
                current = m.group(1).strip()
                if key is None and current == section:
                    return f"{self.source}:{n}"
                continue
            if key is not None and current == section and re.match(rf"{re.escape(key)}\s*=", s):
                return f"{self.source}:{n}"
        return self.source


def _fail(loc, msg):
    raise ValidationError(f"{loc}: {msg}")


def _positive(loc, name, v, allow_none=False):
    if v is None and allow_none:
        return
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        _fail(loc, f"{name} must be a positive number, got {v!r}")


def loads(text: str, source="<string>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{source}: {exc}") from exc
    where = _Locator(source, text)
    cfg = ExperimentConfig(source=source)
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                _fail(where(None, key), f"[{key}] must be a table")
            section = getattr(cfg, key)
            names = {f.name for f in fields(section)}
            for k, v in value.items():
                attr = _RENAMES.get((key, k), k)
                if attr not in names or (key, attr) in {("domain", "lam")} and k != "lambda":
                    _fail(where(key, k), f"unknown key '{k}' in [{key}]")
                setattr(section, attr, v)
        elif key in ("seed", "output_dir"):
            setattr(cfg, key, value)
        else:
            _fail(where(None, key), f"unknown top-level key '{key}'")
    validate(cfg, where)
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return loads(text, str(path))


def validate(cfg: ExperimentConfig, where=None):
    where = where or _Locator(cfg.source, "")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        _fail(where(None, "seed"), "seed must be an integer")
    w = cfg.weights
    if w.mode not in ("explicit", "from-potential"):
        _fail(where("weights", "mode"), f"mode must be 'explicit' or 'from-potential', got {w.mode!r}")
    if w.mode == "explicit":
        if not isinstance(w.c, list) or len(w.c) != 4:
            _fail(where("weights", "c"), "c must list four weights")
        for v in w.c:
            _positive(where("weights", "c"), "each weight", v)
    d = cfg.domain
    _positive(where("domain", "r_star"), "r_star", d.r_star)
    _positive(where("domain", "lambda"), "lambda", d.lam, allow_none=True)
    _positive(where("domain", "eta"), "eta", d.eta, allow_none=True)
    _positive(where("domain", "x_bar"), "x_bar", d.x_bar, allow_none=True)
    if d.eta is not None and d.eta > d.r_star / 2:
        _fail(where("domain", "eta"), f"eta={d.eta} exceeds r_star/2={d.r_star / 2}")
    if not isinstance(d.dims, int) or d.dims < 32:
        _fail(where("domain", "dims"), f"dims must be an integer >= 32, got {d.dims!r}")
    p = cfg.potential
    _positive(where("potential", "well_scale"), "well_scale", p.well_scale)
    _positive(where("potential", "normalization"), "normalization", p.normalization)
    if p.wells is not None and (len(p.wells) != 4 or any(len(x) != 3 for x in p.wells)):
        _fail(where("potential", "wells"), "wells must be four 3-vectors")
    m = cfg.metric
    if not isinstance(m.lattice, int) or m.lattice < 5:
        _fail(where("metric", "lattice"), "lattice must be an integer >= 5")
    if not isinstance(m.samples, int) or m.samples < 3:
        _fail(where("metric", "samples"), "samples must be an integer >= 3")
    r = cfg.relax
    if not isinstance(r.epsilons, list) or not r.epsilons:
        _fail(where("relax", "epsilons"), "epsilons must be a non-empty list")
    for e in r.epsilons:
        if not isinstance(e, (int, float)) or e < 3:
            _fail(where("relax", "epsilons"), f"each epsilon (in units of h) must be >= 3, got {e!r}")
    if sorted(r.epsilons, reverse=True) != list(r.epsilons) or len(set(r.epsilons)) != len(r.epsilons):
        _fail(where("relax", "epsilons"), "epsilons must be strictly decreasing")
    if not 0 < r.dt_factor <= 1:
        _fail(where("relax", "dt_factor"), "dt_factor must lie in (0, 1]")
    _positive(where("relax", "tol"), "tol", r.tol, allow_none=True)
    if not isinstance(r.max_iter, int) or r.max_iter < 1:
        _fail(where("relax", "max_iter"), "max_iter must be a positive integer")
    v = cfg.verify
    _positive(where("verify", "C0"), "C0", v.C0)
    if len(v.radii) != 3:
        _fail(where("verify", "radii"), "radii must list three values")
    for x in v.radii:
        _positive(where("verify", "radii"), "each radius", x)
    for name in ("volume_budget", "probe_tolerance", "shift", "ball", "calibration_tolerance"):
        _positive(where("verify", name), name, getattr(v, name))
    return cfg
