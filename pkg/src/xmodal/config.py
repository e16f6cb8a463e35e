"""Flat ``key = value`` run configuration shared by the CLI and the estimator."""

import dataclasses
import math
from dataclasses import dataclass, fields

from .data import SynthConfig
from .exceptions import ConfigError, ParseError
from .losses import LossWeights
from .model import SgdConfig
from .neighbor import NclrConfig
from .trainer import TrainConfig
from .transport import TransportConfig


@dataclass
class RunConfig:
    """Every tunable of a run, flattened.

    Defaults are the published hyper-parameters (the ``paper`` preset).
    ``clusters_visible`` / ``clusters_infrared`` set to 0 mean "use the number
    of ground-truth identities"; datasets without ids need them set explicitly.
    """

    # synthetic data
    num_identities: int = 20
    dim: int = 16
    per_id_visible: int = 40
    per_id_infrared: int = 40
    noise_sigma: float = 0.3
    gap_strength: float = 1.0
    seed: int = 0
    # pseudo-label initialisation
    clusters_visible: int = 0
    clusters_infrared: int = 0
    kmeans_max_iter: int = 100
    # label assignment
    lam: float = 25.0
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 1000
    # neighbour refinement
    k: int = 10
    tau: float = 1.0
    gamma: float = 0.25
    # losses
    alpha_cncr: float = 0.3
    triplet_margin: float = 0.3
    # optimisation
    lr_stage1: float = 0.1
    lr_stage2: float = 0.01
    momentum: float = 0.9
    warmup_epochs: int = 5
    epochs_stage1: int = 40
    epochs_stage2: int = 20
    ids_per_batch: int = 8
    instances_per_id: int = 4
    steps_per_epoch: int = 0
    hidden_dim: int = 64
    emb_dim: int = 32
    # paths, resolved relative to the working directory
    data_dir: str = ""
    checkpoint: str = ""
    out_dir: str = ""
    preset: str = "paper"

    def __post_init__(self):
        # building the typed configs runs their range checks
        self.synth_config()
        self.train_config()
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    @classmethod
    def from_preset(cls, name="paper", **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})

    def synth_config(self):
        return SynthConfig(self.num_identities, self.dim, self.per_id_visible, self.per_id_infrared,
                           self.noise_sigma, self.gap_strength, self.seed)

    def train_config(self):
        return TrainConfig(
            epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2,
            ids_per_batch=self.ids_per_batch,
            instances_per_id=self.instances_per_id,
            transport=TransportConfig(self.lam, self.sinkhorn_tol, self.sinkhorn_max_iter),
            nclr=NclrConfig(self.k, self.tau, self.gamma),
            weights=LossWeights(self.alpha_cncr, self.triplet_margin),
            sgd=SgdConfig(self.lr_stage1, self.lr_stage2, self.momentum, self.warmup_epochs, self.seed),
            hidden_dim=self.hidden_dim,
            emb_dim=self.emb_dim,
            steps_per_epoch=self.steps_per_epoch,
            seed=self.seed,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = ["# effective configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


# Keys each preset changes relative to the field defaults.
PRESETS = {
    "paper": {},
    "desk": {"epochs_stage1": 10, "epochs_stage2": 10, "ids_per_batch": 4, "instances_per_id": 4},
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    return str(value)


def _convert(key, raw, line_no):
    kind = _FIELD_TYPES[key]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {kind.__name__ if isinstance(kind, type) else kind}",
                         line=line_no) from None
    return raw


def parse_config_text(text):
    """Parse ``key = value`` lines into a dict of typed values; ``#`` starts a comment."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", line=line_no)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {line_no})")
        if key in values:
            raise ConfigError(f"config key {key!r} given twice (line {line_no})")
        values[key] = _convert(key, raw, line_no)
    return values


def load_config(path=None, preset=None, **overrides):
    """Build a :class:`RunConfig` from defaults, a preset, a file and explicit overrides.

    Precedence, lowest first: field defaults, the preset (``preset`` argument
    over the file's ``preset`` key), the file's other keys, ``overrides``.
    Overrides whose value is ``None`` are ignored.
    """
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = parse_config_text(fh.read())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
    name = preset or values.pop("preset", "paper")
    values.pop("preset", None)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    return RunConfig.from_preset(name, **values)
