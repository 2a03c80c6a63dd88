"""Run configuration: an INI file with one section per pipeline stage.

Every key has a default, so a config file only lists what it changes. Lists
are comma-separated. Stage hashes chain upstream sections, so changing e.g.
``[backbone]`` invalidates the backbone, SAE and statistics artifacts but not
the prepared data.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from popsteer.artifacts import stable_hash
from popsteer.backbone import BackboneConfig
from popsteer.errors import ConfigError
from popsteer.sae import SaeConfig


@dataclass(frozen=True)
class GenerateConfig:
    n_users: int = 2000
    n_items: int = 1500
    events_min: int = 20
    events_max: int = 60
    zipf_exponent: float = 0.9
    n_clusters: int = 20
    affinity: float = 0.7
    seed: int = 7


@dataclass(frozen=True)
class DataConfig:
    path: str = ""  # empty: use the generated log in the output directory
    format: str = "tsv"
    kcore: int = 5
    profile_seed: int = 1


@dataclass(frozen=True)
class SteerConfig:
    alpha: float = 1.5
    n_select: int = 0  # 0: all N neurons
    alpha_grid: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
    n_select_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)  # fractions of N
    stats_stage: str = "post_mask"
    max_drop: float = 0.10
    noise_seed: int = 0
    noise_selection: str = "top"
    noise_search_steps: int = 12
    noise_xi_max: float = 2.0


@dataclass(frozen=True)
class DeactivateConfig:
    threshold: float = 1.0
    kprime_grid: tuple[int, ...] = (0, 1, 2, 4, 8, 16)


@dataclass(frozen=True)
class RerankConfig:
    ipr_alpha_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    fair_p_grid: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    fair_alpha: float = 0.1
    n_candidates: int = 500
    random_pool_grid: tuple[int, ...] = (10, 15, 20, 50, 100)
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    lt_mode: str = "slots"
    methods: tuple[str, ...] = ("backbone", "sae", "popsteer", "ipr", "fair", "random")


@dataclass(frozen=True)
class RunConfig:
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sae: SaeConfig = field(default_factory=SaeConfig)
    steer: SteerConfig = field(default_factory=SteerConfig)
    deactivate: DeactivateConfig = field(default_factory=DeactivateConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    # ----------------------------------------------------------- validation

    def validate(self) -> None:
        self.backbone.validate()
        s, st = self.sae, self.steer
        if s.k < 1 or s.k >= self.backbone.dim or s.scale < 1:
            raise ConfigError(f"SAE needs 1 <= K < d and scale >= 1, got K={s.k}, d={self.backbone.dim}")
        if s.epochs < 0 or s.batch_size < 1 or s.learning_rate <= 0:
            raise ConfigError(f"invalid SAE training config: {s}")
        if self.data.format not in ("tsv", "csv"):
            raise ConfigError(f"data format must be tsv or csv, got {self.data.format!r}")
        if st.stats_stage not in ("post_mask", "pre_mask"):
            raise ConfigError(f"stats_stage must be post_mask or pre_mask, got {st.stats_stage!r}")
        if st.noise_selection not in ("top", "random"):
            raise ConfigError(f"noise_selection must be top or random, got {st.noise_selection!r}")
        if not 0 <= st.n_select <= self.n_neurons:
            raise ConfigError(f"n_select={st.n_select} outside [0, {self.n_neurons}]")
        for name, grid in [("alpha_grid", st.alpha_grid), ("n_select_grid", st.n_select_grid),
                           ("kprime_grid", self.deactivate.kprime_grid), ("methods", self.eval.methods)]:
            if not grid:
                raise ConfigError(f"{name} must not be empty")
        if any(not 0 < f <= 1 for f in st.n_select_grid):
            raise ConfigError("n_select_grid entries are fractions of N in (0, 1]")
        if self.eval.k < 1:
            raise ConfigError("eval k must be >= 1")
        if self.data.path and not Path(self.data.path).exists():
            raise ConfigError(f"data file not found: {self.data.path}")

    @property
    def n_neurons(self) -> int:
        return self.sae.scale * self.backbone.dim

    @property
    def n_select_values(self) -> list[int]:
        return [max(1, round(f * self.n_neurons)) for f in self.steer.n_select_grid]

    @property
    def n_select_resolved(self) -> int:
        return self.steer.n_select or self.n_neurons

    # --------------------------------------------------------------- hashes

    def _data_payload(self) -> dict:
        if self.data.path:
            source = {"file_sha256": hashlib.sha256(Path(self.data.path).read_bytes()).hexdigest()}
        else:
            source = {"generate": dataclasses.asdict(self.generate)}
        data = dataclasses.asdict(self.data)
        data.pop("path")
        return {"source": source, "data": data}

    def stage_hashes(self) -> dict[str, str]:
        """Hash per artifact stage; each stage chains everything upstream of it."""
        gen = stable_hash({"generate": dataclasses.asdict(self.generate)})
        data = stable_hash(self._data_payload())
        bb = stable_hash({"up": data, "backbone": dataclasses.asdict(self.backbone)})
        sae = stable_hash({"up": bb, "sae": dataclasses.asdict(self.sae)})
        stats = stable_hash({"up": sae, "stage": self.steer.stats_stage})
        plan = stable_hash({"up": stats, "alpha": self.steer.alpha, "n_select": self.n_select_resolved})
        return {"generate": gen, "data": data, "backbone": bb, "sae": sae, "stats": stats, "plan": plan}

    def config_hash(self) -> str:
        """Hash of everything that affects results (paths and thread counts excluded)."""
        payload = {name: dataclasses.asdict(getattr(self, name))
                   for name in ("backbone", "sae", "steer", "deactivate", "rerank", "eval")}
        payload.update(self._data_payload())
        return stable_hash(payload)


# ------------------------------------------------------------------ parsing

SECTIONS = {
    "generate": GenerateConfig,
    "data": DataConfig,
    "backbone": BackboneConfig,
    "sae": SaeConfig,
    "steer": SteerConfig,
    "deactivate": DeactivateConfig,
    "rerank": RerankConfig,
    "eval": EvalConfig,
}


def _convert(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(_convert(x.strip(), args[0], where) for x in raw.split(",") if x.strip())
        if origin is typing.Union or (origin is not None and type(None) in args):
            if raw.strip().lower() in ("", "none", "auto"):
                return None
            return _convert(raw, next(a for a in args if a is not type(None)), where)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def _section(cls, items: dict[str, str], name: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    return cls(**{k: _convert(v, hints[k], f"[{name}] {k}") for k, v in items.items()})


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS) - {"output"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    parts = {name: _section(cls, dict(parser[name]), name) if parser.has_section(name) else cls()
             for name, cls in SECTIONS.items()}
    if parts["data"].path:
        path = Path(parts["data"].path)
        if not path.is_absolute():
            path = Path(base_dir) / path
        parts["data"] = dataclasses.replace(parts["data"], path=str(path))
    out = parser.get("output", "dir", fallback=RunConfig.output_dir)
    return RunConfig(**parts, output_dir=out)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def with_overrides(cfg: RunConfig, *, alpha=None, n_select=None, k=None, scale=None,
                   output_dir=None) -> RunConfig:
    """Apply command-line overrides (None leaves a value unchanged)."""
    steer = cfg.steer
    if alpha is not None:
        steer = dataclasses.replace(steer, alpha=alpha)
    if n_select is not None:
        steer = dataclasses.replace(steer, n_select=n_select)
    sae = dataclasses.replace(cfg.sae, k=k) if k is not None else cfg.sae
    if scale is not None:
        sae = dataclasses.replace(sae, scale=scale)
    return dataclasses.replace(cfg, steer=steer, sae=sae, output_dir=output_dir or cfg.output_dir)
