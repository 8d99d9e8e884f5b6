"""Run configuration: JSON file < named preset < command-line overrides."""
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from ._validation import InvalidInputError
from .optim import TrainConfig
from .renderer import SamplingConfig
from .warp import WarpConfig


class ConfigError(InvalidInputError):
    def __init__(self, key, msg):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


@dataclass
class RepresentationSpec:
    kind: str = "orthoplanes"
    N: int = 64
    C: int = 8
    K: int = 4
    init_scale: float = 0.1


@dataclass
class DecoderSpec:
    hidden: list = field(default_factory=lambda: [64, 64])
    mode: str = "density"
    alpha: float = 0.1


@dataclass
class SamplingSpec:
    n_coarse: int = 64
    n_fine: int = 64
    perturb: bool = True
    background: list = field(default_factory=lambda: [1.0, 1.0, 1.0])


@dataclass
class OptimSpec:
    steps: int = 3000
    batch_rays: int = 4096
    chunk_rays: int = 1024
    lr_features: float = 1e-2
    lr_decoder: float = 1e-3
    lr_final_scale: float = 0.1
    log_every: int = 10
    eval_every: int = 0
    lambda_deform: float = 0.5
    lambda_offset: float = 1.0
    lambda_eikonal: float = 0.01
    eikonal_points: int = 0


@dataclass
class WarpSpec:
    enabled: bool = False
    d_r: float = 0.1
    alpha_d: float = 0.0
    frequency: float = 6.0


@dataclass
class PathSpec:
    data: str = ""
    out: str = "run"


@dataclass
class RunConfig:
    representation: RepresentationSpec = field(default_factory=RepresentationSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    warp: WarpSpec = field(default_factory=WarpSpec)
    paths: PathSpec = field(default_factory=PathSpec)
    seed: int = 0
    threads: int = 1

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "").validate()

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def override(self, dotted):
        """Copy with ``{"optim.steps": 10, ...}`` applied."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            *head, last = key.split(".")
            for part in head:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(key, "unknown section")
                node = node[part]
            if last not in node:
                raise ConfigError(key, "unknown key")
            node[last] = value
        return RunConfig.from_dict(data)

    def validate(self):
        r = self.representation
        _check(r.kind in ("voxel", "triplane", "orthoplanes"), "representation.kind",
               f"must be voxel, triplane or orthoplanes, got {r.kind!r}")
        _check(r.N >= 2, "representation.N", "must be >= 2")
        _check(r.C >= 1, "representation.C", "must be >= 1")
        _check(r.K >= 1, "representation.K", "must be >= 1")
        _check(r.init_scale >= 0, "representation.init_scale", "must be >= 0")
        _check(len(self.decoder.hidden) >= 1 and all(h >= 1 for h in self.decoder.hidden),
               "decoder.hidden", "needs at least one positive layer width")
        _check(self.decoder.mode in ("density", "delta_sdf"), "decoder.mode", "must be density or delta_sdf")
        _check(self.decoder.alpha > 0, "decoder.alpha", "must be > 0")
        s = self.sampling
        _check(s.n_coarse >= 1, "sampling.n_coarse", "must be >= 1")
        _check(s.n_fine >= 0, "sampling.n_fine", "must be >= 0")
        _check(len(s.background) == 3, "sampling.background", "must have three components")
        o = self.optim
        _check(o.steps >= 0, "optim.steps", "must be >= 0")
        _check(o.batch_rays >= 1, "optim.batch_rays", "must be >= 1")
        _check(o.chunk_rays >= 1, "optim.chunk_rays", "must be >= 1")
        for key in ("lr_features", "lr_decoder", "lambda_deform", "lambda_offset", "lambda_eikonal"):
            _check(getattr(o, key) >= 0, f"optim.{key}", "must be >= 0")
        _check(o.lr_final_scale > 0, "optim.lr_final_scale", "must be > 0")
        _check(o.log_every >= 1, "optim.log_every", "must be >= 1")
        _check(self.warp.d_r > 0, "warp.d_r", "must be > 0")
        _check(self.warp.alpha_d >= 0, "warp.alpha_d", "must be >= 0")
        _check(self.threads >= 1, "threads", "must be >= 1")
        return self

    def sampling_config(self):
        s = self.sampling
        return SamplingConfig(s.n_coarse, s.n_fine, importance=s.n_fine > 0, perturb=s.perturb,
                              background=tuple(s.background))

    def train_config(self):
        o = self.optim
        return TrainConfig(steps=o.steps, batch_rays=o.batch_rays, chunk_rays=o.chunk_rays,
                           lr_features=o.lr_features, lr_decoder=o.lr_decoder, lr_final_scale=o.lr_final_scale,
                           sampling=self.sampling_config(), seed=self.seed, threads=self.threads,
                           log_every=o.log_every, eval_every=o.eval_every, lambda_deform=o.lambda_deform,
                           lambda_offset=o.lambda_offset, lambda_eikonal=o.lambda_eikonal,
                           eikonal_points=o.eikonal_points)

    def warp_config(self):
        w = self.warp
        return WarpConfig(d_r=w.d_r, alpha_d=w.alpha_d, frequency=w.frequency)


def _check(ok, key, msg):
    if not ok:
        raise ConfigError(key, msg)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(prefix + key, "unknown key")
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, prefix + key + ".")
        else:
            kwargs[key] = _coerce(default, value, prefix + key)
    return cls(**kwargs)


def _coerce(default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


# Matched feature budgets: 3 N^2 (4C) == 3 K N^2 C with K = 4.
PRESETS = {
    "triplane-4c": {"representation.kind": "triplane", "representation.N": 64, "representation.C": 32,
                    "representation.K": 1},
    "ortho-k4": {"representation.kind": "orthoplanes", "representation.N": 64, "representation.C": 8,
                 "representation.K": 4},
    "voxel": {"representation.kind": "voxel", "representation.N": 32, "representation.C": 8,
              "representation.K": 1},
}


def load_config(path=None, preset=None, overrides=None):
    """Defaults, then the JSON file, then the preset, then explicit overrides."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                cfg = RunConfig.from_json(fh.read())
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc.strerror}") from None
    if preset:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = cfg.override(PRESETS[preset])
    if overrides:
        cfg = cfg.override(overrides)
    return cfg


__all__ = ["RunConfig", "ConfigError", "PRESETS", "load_config"]
