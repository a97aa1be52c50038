"""Run configuration: one TOML file with sections mirroring the config dataclasses."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .engine import EvolutionConfig
from .genome import EncodingConfig, encoding_to_dict
from .operators import VariationConfig
from .selection import SelectionConfig

SEED_ENV = "EVONET_SEED"
PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    evolution: EvolutionConfig
    sigma: float = 0.1
    cubes: tuple[Path, ...] = ()
    patch_size: int = 16
    stride: int = 8
    split: tuple[float, float, float] = (0.665, 0.152, 0.183)
    profile: str = "desk"
    seed_source: str = "config"

    @property
    def seed(self) -> int:
        return self.evolution.seed

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "seed_source": self.seed_source,
            "evolution": self.evolution.to_dict(),
            "noise": {"sigma": self.sigma},
            "data": {
                "cubes": [str(p) for p in self.cubes],
                "patch_size": self.patch_size,
                "stride": self.stride,
                "split": list(self.split),
            },
        }


def _profile(name: str) -> EvolutionConfig:
    if name == "desk":
        return EvolutionConfig.desk()
    if name == "full":
        return EvolutionConfig.full()
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")


def _override(obj, section: str, values: dict):
    names = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


_TOML_POS = re.compile(r"\(at line (\d+), column (\d+)\)")


def parse_run_config(text: str, base_dir: Path = Path("."), env=None) -> RunConfig:
    env = os.environ if env is None else env
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _TOML_POS.search(str(exc))
        where = f"line {m.group(1)}, column {m.group(2)}" if m else "unknown position"
        raise ConfigError(f"config parse error at {where}: {exc}") from exc

    allowed = {"profile", "seed", "evolution", "encoding", "variation", "selection", "noise", "data"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    profile = doc.get("profile", "desk")
    evo = _profile(profile)

    enc = evo.encoding
    if "encoding" in doc:
        known = {f.name for f in fields(EncodingConfig)}
        unknown = sorted(set(doc["encoding"]) - known)
        if unknown:
            raise ConfigError(f"[encoding] unknown keys: {', '.join(unknown)}")
        try:
            enc = EncodingConfig(**{**encoding_to_dict(enc), **doc["encoding"]})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[encoding] {exc}") from exc
    var = _override(evo.variation, "variation", doc.get("variation", {}))
    sel = _override(evo.selection, "selection", doc.get("selection", {}))

    if "seed" not in doc and SEED_ENV not in env:
        raise ConfigError("config must set 'seed' (or export EVONET_SEED)")
    seed, source = doc.get("seed"), "config"
    if SEED_ENV in env:
        try:
            seed, source = int(env[SEED_ENV]), "env:" + SEED_ENV
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    evo_values = dict(doc.get("evolution", {}))
    for key in ("encoding", "variation", "selection", "seed"):
        if key in evo_values:
            raise ConfigError(f"[evolution] '{key}' belongs in its own section")
    evo = _override(evo, "evolution", {**evo_values, "encoding": enc, "variation": var,
                                       "selection": sel, "seed": seed})

    noise = doc.get("noise", {})
    if set(noise) - {"sigma"}:
        raise ConfigError(f"[noise] unknown keys: {', '.join(sorted(set(noise) - {'sigma'}))}")
    data = doc.get("data", {})
    unknown = sorted(set(data) - {"cubes", "patch_size", "stride", "split"})
    if unknown:
        raise ConfigError(f"[data] unknown keys: {', '.join(unknown)}")
    cubes = tuple((base_dir / p) if not Path(p).is_absolute() else Path(p) for p in data.get("cubes", []))
    rc = RunConfig(
        evolution=evo,
        sigma=float(noise.get("sigma", 0.1)),
        cubes=cubes,
        patch_size=int(data.get("patch_size", 16)),
        stride=int(data.get("stride", 8)),
        split=tuple(float(x) for x in data.get("split", (0.665, 0.152, 0.183))),
        profile=profile,
        seed_source=source,
    )
    if rc.sigma < 0:
        raise ConfigError("[noise] sigma must be >= 0")
    if len(rc.split) != 3:
        raise ConfigError("[data] split needs three fractions")
    return rc


def load_run_config(path, env=None, require_data: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    rc = parse_run_config(text, path.parent, env)
    if require_data:
        if not rc.cubes:
            raise ConfigError("[data] cubes must list at least one HSC1 file")
        missing = [str(p) for p in rc.cubes if not p.exists()]
        if missing:
            raise ConfigError(f"[data] missing cube files: {', '.join(missing)}")
    return rc
