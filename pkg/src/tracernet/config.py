"""Flat ``key = value`` experiment configuration with schema validation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigError
from .phantom import SCHEDULE, SUPPORTED_GRIDS

# Input-stage ablations mapped to phantom time points (hours).
DEFAULT_ABLATIONS: dict[str, tuple[float, ...]] = {
    "pre-injection": (0.0,),
    "1-2 hours": (1.5,),
    "3-5 hours": (4.0,),
    "5-7 hours": (6.0,),
    "7-9 hours": (8.0,),
    "1-9 hours": (1.5, 4.0, 6.0, 8.0),
}


def _grade_mix(text: str) -> dict[int, float]:
    mix = {}
    for part in text.split(","):
        g, _, p = part.partition(":")
        mix[int(g.strip())] = float(p.strip())
    if abs(sum(mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in mix.values()):
        raise ValueError("proportions must be non-negative and sum to 1")
    if any(g not in range(5) for g in mix):
        raise ValueError("grades must lie in 0..4")
    return mix


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _times(text: str) -> tuple[float, ...]:
    times = tuple(sorted(float(t) for t in text.split(",") if t.strip()))
    if not times:
        raise ValueError("empty time list")
    bad = [t for t in times if t not in SCHEDULE or t == 24.0]
    if bad:
        raise ValueError(f"time points {bad} are not input times of the schedule {SCHEDULE}")
    return times


def _positive(conv):
    def check(text):
        v = conv(text)
        if v <= 0:
            raise ValueError("must be positive")
        return v
    return check


def _non_negative(conv):
    def check(text):
        v = conv(text)
        if v < 0:
            raise ValueError("must be non-negative")
        return v
    return check


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise ValueError("must lie strictly between 0 and 1")
    return v


def _grid(text):
    v = int(text)
    if v not in SUPPORTED_GRIDS:
        raise ValueError(f"must be one of {SUPPORTED_GRIDS}")
    return v


def _loss_kind(text):
    v = text.strip().upper()
    if v not in ("L1", "L2"):
        raise ValueError("must be L1 or L2")
    return v


def _labels(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


# key -> (parser, default, description)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "cohort.n": (_positive(int), 136, "number of synthetic subjects"),
    "cohort.seed": (int, 0, "cohort seed; per-subject seeds derive from it"),
    "cohort.grid_size": (_grid, 64, "image extent N (N×N per plane)"),
    "cohort.grade_mix": (_grade_mix, {0: 0.3, 3: 0.4, 4: 0.3}, "grade:proportion list"),
    "cohort.noise_sigma": (_non_negative(float), 0.01, "noise std as a fraction of parenchymal intensity"),
    "cohort.train_fraction": (_fraction, 105 / 136, "fraction of subjects in the training split"),
    "cohort.split_seed": (int, 0, "seed of the train/test permutation"),
    "cohort.transient_grades": (_bool, False, "allow grade 1-2 subjects"),
    "model.in_channels": (_non_negative(int), 0, "input channels; 0 derives 2 per ablation time point"),
    "model.base_features": (_positive(int), 16, "first-level width (64 at full scale)"),
    "model.depth": (_positive(int), 2, "pooling levels (4 at 256×256)"),
    "training.loss_kind": (_loss_kind, "L2", "L1 or L2"),
    "training.epochs": (_positive(int), 250, "training epochs"),
    "training.batch_size": (_positive(int), 8, "mini-batch size"),
    "training.learning_rate": (_non_negative(float), 1e-3, "Adam learning rate"),
    "training.seed": (int, 0, "weight-init and shuffling seed"),
    "training.log_every": (_positive(int), 1, "epochs between loss-curve records"),
    "grader.theta_e": (_positive(float), 0.1, "ventricular enhancement threshold"),
    "grader.tau": (_positive(float), 0.8, "ventricle/SAS isointensity ratio"),
    "ablation.run": (_labels, (), "labels to run (default: all defined)"),
    "paths.workspace": (str, "workspace", "workspace root directory"),
}
ABLATION_PREFIX = "ablation."


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})
    ablations: dict[str, tuple[float, ...]] = field(default_factory=lambda: dict(DEFAULT_ABLATIONS))

    def __getitem__(self, key: str):
        return self.values[key]

    def __setitem__(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    def selected_ablations(self, label: str | None = None) -> dict[str, tuple[float, ...]]:
        names = [label] if label else (list(self.values["ablation.run"]) or list(self.ablations))
        missing = [n for n in names if n not in self.ablations]
        if missing:
            raise ConfigError(f"unknown ablation label(s): {missing}; defined: {list(self.ablations)}")
        return {n: self.ablations[n] for n in names}

    def dumps(self) -> str:
        """Resolved configuration in the same key = value syntax."""
        lines = ["# resolved configuration"]
        for key, (_, default, doc) in SCHEMA.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {_render(self.values[key])}")
        for label, times in self.ablations.items():
            lines.append(f"{ABLATION_PREFIX}{label} = {_render(times)}")
        return "\n".join(lines) + "\n"

    def digest(self, *prefixes: str) -> str:
        items = [f"{k}={_render(v)}" for k, v in sorted(self.values.items()) if k.startswith(prefixes)]
        if any(p.startswith("ablation") for p in prefixes):
            items += [f"{k}={_render(v)}" for k, v in self.ablations.items()]
        return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def _render(v) -> str:
    if isinstance(v, dict):
        return ",".join(f"{k}:{repr(float(p))}" for k, p in v.items())
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Any ``ablation.<label> = t1,t2`` line defines an input-stage
    configuration; if one is present, the defaults are replaced entirely.
    """
    cfg = ExperimentConfig()
    ablations: dict[str, tuple[float, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key.startswith(ABLATION_PREFIX) and key not in SCHEMA:
            label = key[len(ABLATION_PREFIX):].strip()
            try:
                ablations[label] = _times(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: key {key!r}: {exc}") from None
            continue
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            cfg.values[key] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: key {key!r}: invalid value {value!r} ({exc})") from None
    if ablations:
        cfg.ablations = ablations
    return cfg
