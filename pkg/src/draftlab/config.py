"""Experiment configuration: a flat INI-style grammar with typed keys.

Grammar, one construct per line::

    # comment            (also ';')
    [section]
    key = value

Keys are lower-case identifiers, values run to the end of the line with
surrounding whitespace removed. Every key and section remembers its line so
diagnostics can point at it. ``normalized_text`` renders the effective config
with all defaults filled; validating that text again yields the same text.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .audio import FeatureConfig
from .data import SOURCE_NOISE, TARGET_NOISE
from .errors import ConfigurationError, ResolvablePathError
from .model import PLACEMENTS, PRESETS, ModelConfig
from .params import Group, parse_groups

REGIMES = ("baseline", "finetune", "adapter_finetune", "saft_self", "draft_self", "saft_cross", "draft_cross")
SSL_OBJECTIVES = ("apc", "masked", "contrastive")
_SECTION = re.compile(r"^\[([a-z_][a-z0-9_]*)\]$")
_ENTRY = re.compile(r"^([a-z_][a-z0-9_]*)\s*=\s*(.*)$")


# -- value types ----------------------------------------------------------------
def _int(s: str) -> int:
    return int(s)


def _pos_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _float(s: str) -> float:
    return float(s)


def _opt_float(s: str) -> float | None:
    return None if s.lower() == "none" else float(s)


def _opt_int(s: str) -> int | None:
    return None if s.lower() == "none" else _pos_int(s)


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _opt_seed(s: str) -> int | None:
    return None if s.lower() == "none" else int(s)


def _str(s: str) -> str:
    return s


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _opt_int_list(s: str) -> tuple[int, ...] | None:
    if s.lower() == "none":
        return None
    return tuple(int(x) for x in s.replace(",", " ").split())


def _groups(s: str) -> frozenset[Group]:
    return parse_groups(x for x in s.replace(",", " ").split())


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (frozenset, set)):
        return ", ".join(g.label for g in sorted(v))
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


_STAGE_KEYS = {
    "steps": (_pos_int, 200),
    "batch_size": (_pos_int, 8),
    "scheduler": (_choice("noam", "tristage"), "noam"),
    "factor": (_float, 1.0),
    "warmup_steps": (_int, 50),
    "hold_steps": (_int, 0),
    "peak_lr": (_float, 1e-3),
    "final_ratio": (_opt_float, 0.05),
    "log_every": (_pos_int, 10),
}

# section -> key -> (parser, default); a default of ... means "required"
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "experiment": {
        "regime": (_choice(*REGIMES), ...),
        "objective": (_choice(*SSL_OBJECTIVES), "apc"),
        "seed": (_int, 0),
        "d_ada": (_opt_int, None),
        "pretrained": (_str, ""),
        "allow_objective_mismatch": (_bool, False),
    },
    "model": {
        "preset": (_choice(*PRESETS), "desk"),
        "d_model": (_opt_int, None),
        "n_layers": (_opt_int, None),
        "n_heads": (_opt_int, None),
        "d_ff": (_opt_int, None),
        "causal": (_bool, True),
        "apc_shifts": (_opt_int_list, None),
        "n_clusters": (_opt_int, None),
        "adapter_placement": (_choice(*PLACEMENTS), "block_output"),
    },
    "features": {
        "sample_rate": (_pos_int, 16000),
        "window": (_float, 0.025),
        "hop": (_float, 0.010),
        "n_fft": (_pos_int, 512),
        "mel_floor": (_float, 1e-10),
    },
    "data": {
        "synthetic": (_bool, False),
        "source": (_str, ""),
        "adapt": (_str, ""),
        "train": (_str, ""),
        "dev": (_str, ""),
        "test": (_str, ""),
    },
    "synthetic": {
        "seed": (_opt_seed, None),
        "n_source": (_pos_int, 300),
        "n_adapt": (_pos_int, 200),
        "n_train": (_pos_int, 16),
        "n_dev": (_pos_int, 100),
        "n_test": (_pos_int, 200),
        "source_noise": (_float, SOURCE_NOISE),
        "target_noise": (_float, TARGET_NOISE),
    },
    "ssl": {
        "mask_prob": (_float, 0.065),
        "mask_span": (_pos_int, 10),
        "n_negatives": (_pos_int, 10),
        "temperature": (_float, 0.1),
        "kmeans_iters": (_pos_int, 30),
        "kmeans_frames": (_pos_int, 20000),
    },
    "pretrain": dict(_STAGE_KEYS),
    "adapt": dict(_STAGE_KEYS),
    "finetune": {**_STAGE_KEYS, "trainable": (_groups, None), "augment": (_bool, False)},
}
OPTIONAL_SECTIONS = ("pretrain", "adapt")
PATH_KEYS = {("experiment", "pretrained"), ("data", "source"), ("data", "adapt"), ("data", "train"),
             ("data", "dev"), ("data", "test")}


@dataclass
class RawConfig:
    path: str
    sections: dict[str, dict[str, tuple[str, int]]]
    section_lines: dict[str, int]


def _nearest(word: str, options) -> str:
    close = difflib.get_close_matches(word, list(options), n=1, cutoff=0.0)
    return close[0] if close else ""


def parse_text(text: str, path: str = "<config>") -> RawConfig:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    lines: dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1)
            if name not in SCHEMA:
                raise ConfigurationError(
                    f"{path}:{lineno}: unknown section [{name}] (did you mean [{_nearest(name, SCHEMA)}]?)")
            if name in sections:
                raise ConfigurationError(f"{path}:{lineno}: section [{name}] repeated (first at line {lines[name]})")
            sections[name], lines[name], current = {}, lineno, name
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigurationError(f"{path}:{lineno}: expected '[section]' or 'key = value', got {line!r}")
        if current is None:
            raise ConfigurationError(f"{path}:{lineno}: key {m.group(1)!r} appears before any section")
        key, value = m.group(1), m.group(2).strip()
        if key not in SCHEMA[current]:
            raise ConfigurationError(
                f"{path}:{lineno}: unknown key {key!r} in [{current}] "
                f"(nearest valid key: {_nearest(key, SCHEMA[current])!r})")
        if key in sections[current]:
            raise ConfigurationError(f"{path}:{lineno}: key {key!r} repeated in [{current}]")
        sections[current][key] = (value, lineno)
    return RawConfig(path, sections, lines)


@dataclass
class StageSettings:
    steps: int
    batch_size: int
    scheduler: str
    factor: float
    warmup_steps: int
    hold_steps: int
    peak_lr: float
    final_ratio: float | None
    log_every: int
    trainable: frozenset | None = None
    augment: bool = False


@dataclass
class ExperimentConfig:
    regime: str
    objective: str
    seed: int
    d_ada: int | None
    model: ModelConfig
    features: FeatureConfig
    values: dict[str, dict[str, Any]]
    stages: dict[str, StageSettings]
    source_path: str = "<config>"
    out_dir: str | None = None
    lines: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def uses_adapters(self) -> bool:
        return self.regime in ("draft_self", "draft_cross", "adapter_finetune")

    @property
    def is_cross(self) -> bool:
        return self.regime.endswith("_cross")

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_overrides(self, seed: int | None = None, d_ada: int | None = None) -> "ExperimentConfig":
        text = normalized_text(self)
        cfg = load_text(text, self.source_path, base_dir=None)
        if seed is not None:
            cfg.seed = seed
            cfg.values["experiment"]["seed"] = seed
        if d_ada is not None:
            cfg.d_ada = d_ada
            cfg.values["experiment"]["d_ada"] = d_ada
        cfg.out_dir = self.out_dir
        return cfg


def _typed(raw: RawConfig) -> tuple[dict[str, dict[str, Any]], dict[tuple[str, str], int]]:
    values: dict[str, dict[str, Any]] = {}
    lines = {}
    for section, keys in SCHEMA.items():
        given = raw.sections.get(section)
        if given is None and section in OPTIONAL_SECTIONS:
            continue
        given = given or {}
        values[section] = {}
        for key, (parse, default) in keys.items():
            if key in given:
                text, lineno = given[key]
                lines[(section, key)] = lineno
                try:
                    values[section][key] = parse(text)
                except (ValueError, ConfigurationError) as exc:
                    raise ConfigurationError(f"{raw.path}:{lineno}: bad value for {key!r}: {exc}") from None
            elif default is ...:
                where = raw.section_lines.get(section)
                loc = f"{raw.path}:{where}" if where else raw.path
                raise ConfigurationError(f"{loc}: missing required key {key!r} in [{section}]")
            else:
                values[section][key] = default
    return values, lines


def _where(cfg_path: str, lines, section: str, key: str) -> str:
    n = lines.get((section, key)) or lines.get(("experiment", "regime"))
    return f"{cfg_path}:{n}" if n else cfg_path


def check_regime(values, lines, path: str) -> None:
    """Regime rules; each error cites the rule it violates."""
    exp = values["experiment"]
    regime = exp["regime"]

    def fail(section, key, msg):
        raise ConfigurationError(f"{_where(path, lines, section, key)}: {msg}")

    needs_adapters = regime in ("draft_self", "draft_cross", "adapter_finetune")
    if needs_adapters and exp["d_ada"] is None:
        fail("experiment", "regime", f"regime {regime} requires d_ada")
    if not needs_adapters and exp["d_ada"] is not None:
        fail("experiment", "d_ada", f"regime {regime} has no adapters, so d_ada must not be set")
    if regime == "baseline":
        if "pretrain" in values:
            fail("experiment", "regime", "regime baseline forbids a [pretrain] stage (no self-supervised learning)")
        if exp["pretrained"]:
            fail("experiment", "pretrained", "regime baseline forbids a pretrained checkpoint")
    else:
        if "pretrain" in values and exp["pretrained"]:
            fail("experiment", "pretrained", f"regime {regime} takes either a [pretrain] stage or a pretrained "
                                             "checkpoint, not both")
        if "pretrain" not in values and not exp["pretrained"]:
            fail("experiment", "regime", f"regime {regime} requires a [pretrain] stage or a pretrained checkpoint")
    has_adapt = regime in ("saft_self", "draft_self", "saft_cross", "draft_cross")
    if has_adapt and "adapt" not in values:
        fail("experiment", "regime", f"regime {regime} requires an [adapt] stage")
    if not has_adapt and "adapt" in values:
        fail("experiment", "regime", f"regime {regime} has no adaptation stage, so [adapt] must not be present")
    data = values["data"]
    if not data["synthetic"]:
        for key in ("train", "test"):
            if not data[key]:
                fail("data", "synthetic", f"[data] {key} is required unless synthetic = true")
        if "pretrain" in values and not data["source"]:
            fail("data", "source", f"regime {regime} pretrains, so [data] source is required")
        if regime.endswith("_cross") and not data["adapt"]:
            fail("data", "adapt", f"regime {regime} adapts on a different corpus, so [data] adapt is required")
    trainable = values["finetune"]["trainable"]
    if trainable is not None:
        if Group.ASR_HEAD not in trainable:
            fail("finetune", "trainable", "the finetune stage must train AsrHead")
        if Group.SSL_HEAD in trainable:
            fail("finetune", "trainable", "the SSL head does not exist during finetuning")
        if Group.ADAPTER in trainable and not needs_adapters:
            fail("finetune", "trainable", f"regime {regime} has no adapters to train")
        if regime == "adapter_finetune" and Group.BACKBONE in trainable:
            fail("finetune", "trainable", "regime adapter_finetune keeps the backbone frozen")
    for stage in ("pretrain", "adapt", "finetune"):
        st = values.get(stage)
        if st is None:
            continue
        if st["scheduler"] == "tristage" and st["warmup_steps"] + st["hold_steps"] > st["steps"]:
            fail(stage, "hold_steps", f"[{stage}] warmup_steps + hold_steps exceeds steps")
        if st["scheduler"] == "noam" and st["warmup_steps"] < 1:
            fail(stage, "warmup_steps", f"[{stage}] noam needs warmup_steps >= 1")


def default_trainable(regime: str) -> frozenset:
    if regime == "adapter_finetune":
        return frozenset({Group.ADAPTER, Group.ASR_HEAD})
    if regime in ("draft_self", "draft_cross"):
        return frozenset({Group.BACKBONE, Group.ADAPTER, Group.ASR_HEAD})
    return frozenset({Group.BACKBONE, Group.ASR_HEAD})


def _resolve_paths(values, lines, path: str, base_dir: Path | None) -> None:
    for section, key in sorted(PATH_KEYS):
        val = values.get(section, {}).get(key)
        if not val:
            continue
        p = Path(val)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            n = lines.get((section, key))
            loc = f"{path}:{n}" if n else path
            raise ResolvablePathError(f"{loc}: [{section}] {key} does not exist: {p}")
        values[section][key] = str(p.resolve())


def _derived_defaults(values, lines) -> None:
    ad = values.get("adapt")
    if ad is not None and ("adapt", "scheduler") not in lines and values["experiment"]["objective"] != "apc":
        # masked/contrastive adaptation ramps up then decays linearly to zero
        ad.update(scheduler="tristage", final_ratio=None)
        if ("adapt", "warmup_steps") not in lines:
            ad["warmup_steps"] = max(1, ad["steps"] // 10)


def build(values, lines, path: str) -> ExperimentConfig:
    exp, m = values["experiment"], values["model"]
    overrides = {k: m[k] for k in ("d_model", "n_layers", "n_heads", "d_ff", "apc_shifts", "n_clusters")
                 if m[k] is not None}
    overrides.update(causal=m["causal"], adapter_placement=m["adapter_placement"])
    model = PRESETS[m["preset"]](**overrides)
    f = values["features"]
    features = FeatureConfig(sample_rate=f["sample_rate"], window=f["window"], hop=f["hop"],
                             n_fft=f["n_fft"], mel_floor=f["mel_floor"])
    if values["finetune"]["trainable"] is None:
        values["finetune"]["trainable"] = default_trainable(exp["regime"])
    stages = {name: StageSettings(**values[name]) for name in ("pretrain", "adapt", "finetune") if name in values}
    return ExperimentConfig(exp["regime"], exp["objective"], exp["seed"], exp["d_ada"], model, features,
                            values, stages, path, lines=lines)


def load_text(text: str, path: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    raw = parse_text(text, path)
    values, lines = _typed(raw)
    _derived_defaults(values, lines)
    check_regime(values, lines, path)
    _resolve_paths(values, lines, path, base_dir)
    try:
        return build(values, lines, path)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ResolvablePathError(f"config file not found: {path}")
    return load_text(path.read_text(encoding="utf-8"), str(path), base_dir=path.parent)


def normalized_text(cfg: ExperimentConfig) -> str:
    """Every section in schema order with every key, defaults filled in."""
    out = []
    for section, keys in SCHEMA.items():
        if section not in cfg.values:
            continue
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {_fmt(cfg.values[section][key])}")
        out.append("")
    return "\n".join(out)


def write_normalized(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.normalized.ini"
    target.write_text(normalized_text(cfg), encoding="utf-8")
    return target
