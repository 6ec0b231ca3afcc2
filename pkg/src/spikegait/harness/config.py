"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys and unparsable values raise ConfigError.
Lists are comma separated. Lines starting with ``#`` are comments.

Keys (defaults in parentheses):

    seed (0)                         master seed: data, init, sampling
    n_identities (8)                 toy identities
    sequences_per_identity (6)       evaluation sequences per identity
    train_sequences_per_identity (16) training sequences per identity (disjoint renders)
    frames_per_sequence (32)
    frame_size (64)                  square frame side in pixels
    frame_interval_us (40000)
    conditions (bright,dim)          illumination condition names
    brightness (1.0,0.15)            global intensity scale per condition
    cutoff_hz (300,60)               photoreceptor low-pass per condition (0 disables)
    noise_rate_hz (1,5)              Poisson noise rate per condition
    threshold_c (0.2)                log contrast threshold
    refractory_us (100)
    interp_factor (2)                temporal upsampling before event generation
    log_eps (0.001)
    num_dynamic_slices (8)           short-term slices = SNN time steps
    k_dynamic (4)                    bins per dynamic slice
    k_static (8)                     bins of the long-term slice
    input_size (64)                  pad-and-resize target side
    input_norm (rms)                 rms | none: per-sample scaling of the voxel inputs
    streams (dual)                   dual | static | dynamic
    embed_dim (64)
    dynamic_widths (16,32)
    expert_taus (2,8,32)
    gate_hidden (8)
    dynamic_kernel (3)               spatial receptive field of the expert synapses
    input_pool (4)                   spatial pooling before the first MoSE layer
    dynamic_input_scale (1.0)        multiplier on dynamic voxel values
    surrogate_beta (4.0)
    static_widths (16,32,64)
    static_embed_dim (64)
    static_input_scale (1.0)         multiplier on static voxel values
    teacher_dim (64)
    teacher_seed (1234)              seed of the pseudo-teacher projection
    teacher_features ()              optional TFS1 file overriding the pseudo-teacher
    lambda_d (0.2)
    triplet_margin (0.2)
    lr (0.01)
    weight_decay (0.0005)
    momentum (0.9)
    lr_drop_iter (0)                 iteration of a single x0.1 drop (0 = never)
    batch_p (4)                      identities per batch
    batch_k (2)                      sequences per identity per batch
    iterations (2000)
    log_every (1)
    checkpoint_every (500)
    threads (1)                      torch threads; 1 = deterministic mode
    cache_dir ()                     optional cache of synthesized voxel grids
    export_eval (false)              write evaluation event files under the run directory
    gradcheck_size (4)               spatial side of the gradcheck toy input
    gradcheck_model (full)           full | static | dynamic | affine | empty
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from spikegait.errors import ConfigError


def _tuple(cast):
    def parse(text):
        text = text.strip()
        if not text:
            return ()
        return tuple(cast(v.strip()) for v in text.split(","))

    return parse


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_identities: int = 8
    sequences_per_identity: int = 6
    train_sequences_per_identity: int = 16
    frames_per_sequence: int = 32
    frame_size: int = 64
    frame_interval_us: int = 40000
    conditions: tuple = ("bright", "dim")
    brightness: tuple = (1.0, 0.15)
    cutoff_hz: tuple = (300.0, 60.0)
    noise_rate_hz: tuple = (1.0, 5.0)
    threshold_c: float = 0.2
    refractory_us: float = 100.0
    interp_factor: int = 2
    log_eps: float = 1e-3
    num_dynamic_slices: int = 8
    k_dynamic: int = 4
    k_static: int = 8
    input_size: int = 64
    input_norm: str = "rms"
    streams: str = "dual"
    embed_dim: int = 64
    dynamic_widths: tuple = (16, 32)
    expert_taus: tuple = (2.0, 8.0, 32.0)
    gate_hidden: int = 8
    dynamic_kernel: int = 3
    input_pool: int = 4
    dynamic_input_scale: float = 1.0
    surrogate_beta: float = 4.0
    static_widths: tuple = (16, 32, 64)
    static_embed_dim: int = 64
    static_input_scale: float = 1.0
    teacher_dim: int = 64
    teacher_seed: int = 1234
    teacher_features: str = ""
    lambda_d: float = 0.2
    triplet_margin: float = 0.2
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_drop_iter: int = 0
    batch_p: int = 4
    batch_k: int = 2
    iterations: int = 2000
    log_every: int = 1
    checkpoint_every: int = 500
    threads: int = 1
    cache_dir: str = ""
    export_eval: bool = False
    gradcheck_size: int = 4
    gradcheck_model: str = "full"

    def __post_init__(self):
        n = len(self.conditions)
        for name in ("brightness", "cutoff_hz", "noise_rate_hz"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs one value per condition ({n})")
        if self.n_identities < 2:
            raise ConfigError("n_identities must be >= 2")
        if self.frames_per_sequence < 8:
            raise ConfigError("frames_per_sequence must be >= 8")
        if self.input_norm not in ("rms", "none"):
            raise ConfigError(f"unknown input_norm {self.input_norm!r}")
        if self.streams not in ("dual", "static", "dynamic"):
            raise ConfigError(f"unknown streams value {self.streams!r}")
        if self.batch_p < 2 or self.batch_k < 1:
            raise ConfigError("batch_p must be >= 2 and batch_k >= 1")
        if self.batch_p > self.n_identities:
            raise ConfigError("batch_p exceeds the number of identities")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be >= 0")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {}
for _f in dataclasses.fields(RunConfig):
    _d = _f.default
    if isinstance(_d, bool):
        _PARSERS[_f.name] = _bool
    elif isinstance(_d, int):
        _PARSERS[_f.name] = int
    elif isinstance(_d, float):
        _PARSERS[_f.name] = float
    elif isinstance(_d, str):
        _PARSERS[_f.name] = str
    elif isinstance(_d, tuple):
        _PARSERS[_f.name] = _tuple(type(_d[0]) if _d else str)


def parse_config_text(text, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {ln}: expected key = value")
        if key not in _PARSERS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {ln}: bad value for {key}: {exc}") from None
    base = base or RunConfig()
    try:
        return dataclasses.replace(base, **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
