"""Variable-length chromosome: conv blocks plus a fixed-shape tail conv."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import BatchNorm, Conv, Network, ReflectPad, ReLU, gaussian_init


@dataclass(frozen=True)
class EncodingConfig:
    n_min: int = 4
    n_max: int = 8
    kernel_sizes: tuple[int, ...] = (1, 3)
    f_min: int = 128
    f_max: int = 512
    mean_range: tuple[float, float] = (-0.8, 0.8)
    std_range: tuple[float, float] = (0.0, 0.5)
    tail_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "mean_range", tuple(float(v) for v in self.mean_range))
        object.__setattr__(self, "std_range", tuple(float(v) for v in self.std_range))
        problems = []
        if self.n_min < 1 or self.n_max < self.n_min:
            problems.append(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.f_min < 1 or self.f_max < self.f_min:
            problems.append(f"need 1 <= f_min <= f_max, got {self.f_min}, {self.f_max}")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            problems.append(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if self.tail_kernel < 1 or self.tail_kernel % 2 == 0:
            problems.append(f"tail kernel must be odd and positive, got {self.tail_kernel}")
        if self.mean_range[0] > self.mean_range[1]:
            problems.append(f"empty mean range {self.mean_range}")
        if self.std_range[0] < 0 or self.std_range[0] > self.std_range[1]:
            problems.append(f"std range must satisfy 0 <= lo <= hi, got {self.std_range}")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def full(cls) -> EncodingConfig:
        return cls()

    @classmethod
    def desk(cls) -> EncodingConfig:
        return cls(n_min=2, n_max=4, f_min=8, f_max=32)


@dataclass(frozen=True)
class BlockGene:
    kernel_size: int
    feature_maps: int
    weight_mean: float
    weight_std: float


@dataclass(frozen=True)
class TailGene:
    weight_mean: float
    weight_std: float


@dataclass(frozen=True)
class Chromosome:
    blocks: tuple[BlockGene, ...]
    tail: TailGene

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def __len__(self):
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {"blocks": [asdict(b) for b in self.blocks], "tail": asdict(self.tail)}

    @classmethod
    def from_dict(cls, d: dict) -> Chromosome:
        blocks = tuple(
            BlockGene(int(b["kernel_size"]), int(b["feature_maps"]),
                      float(b["weight_mean"]), float(b["weight_std"]))
            for b in d["blocks"]
        )
        tail = TailGene(float(d["tail"]["weight_mean"]), float(d["tail"]["weight_std"]))
        return cls(blocks, tail)

    def digest(self) -> str:
        """Stable short hash of the gene values, used as the fitness-cache key."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def random_block(cfg: EncodingConfig, rng: np.random.Generator) -> BlockGene:
    return BlockGene(
        kernel_size=int(rng.choice(cfg.kernel_sizes)),
        feature_maps=int(rng.integers(cfg.f_min, cfg.f_max + 1)),
        weight_mean=float(rng.uniform(*cfg.mean_range)),
        weight_std=float(rng.uniform(*cfg.std_range)),
    )


def random_chromosome(cfg: EncodingConfig, rng: np.random.Generator) -> Chromosome:
    depth = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    blocks = tuple(random_block(cfg, rng) for _ in range(depth))
    tail = TailGene(float(rng.uniform(*cfg.mean_range)), float(rng.uniform(*cfg.std_range)))
    return Chromosome(blocks, tail)


def _in_range(x: float, bounds: tuple[float, float]) -> bool:
    return bounds[0] <= x <= bounds[1]


def validate(c: Chromosome, cfg: EncodingConfig) -> list[str]:
    """Every invariant violation in ``c``; an empty list means valid."""
    problems = []
    n = len(c.blocks)
    if n < cfg.n_min:
        problems.append(f"block count below N_min ({n} < {cfg.n_min})")
    if n > cfg.n_max:
        problems.append(f"block count above N_max ({n} > {cfg.n_max})")
    for i, b in enumerate(c.blocks):
        if b.kernel_size % 2 == 0 or b.kernel_size not in cfg.kernel_sizes:
            problems.append(f"block {i}: kernel size not odd/allowed ({b.kernel_size})")
        if not cfg.f_min <= b.feature_maps <= cfg.f_max:
            problems.append(f"block {i}: feature maps {b.feature_maps} outside [{cfg.f_min}, {cfg.f_max}]")
        if not _in_range(b.weight_mean, cfg.mean_range):
            problems.append(f"block {i}: weight mean {b.weight_mean} outside {cfg.mean_range}")
        if not _in_range(b.weight_std, cfg.std_range):
            problems.append(f"block {i}: weight std {b.weight_std} outside {cfg.std_range}")
    if not _in_range(c.tail.weight_mean, cfg.mean_range):
        problems.append(f"tail: weight mean {c.tail.weight_mean} outside {cfg.mean_range}")
    if not _in_range(c.tail.weight_std, cfg.std_range):
        problems.append(f"tail: weight std {c.tail.weight_std} outside {cfg.std_range}")
    return problems


class InvalidChromosomeError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid chromosome: " + "; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class LayerSpec:
    """One decoded layer before weights are materialised."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    pad: int = 0
    weight_mean: float = 0.0
    weight_std: float = 0.0


def decode(c: Chromosome, in_channels: int, cfg: EncodingConfig) -> list[LayerSpec]:
    problems = validate(c, cfg)
    if problems:
        raise InvalidChromosomeError(problems)
    specs = []
    channels = in_channels
    for b in c.blocks:
        specs.append(LayerSpec("conv", channels, b.feature_maps, b.kernel_size,
                               weight_mean=b.weight_mean, weight_std=b.weight_std))
        if b.kernel_size != 1:
            specs.append(LayerSpec("reflect_pad", pad=(b.kernel_size - 1) // 2))
        specs.append(LayerSpec("batch_norm", b.feature_maps, b.feature_maps))
        specs.append(LayerSpec("relu"))
        channels = b.feature_maps
    specs.append(LayerSpec("conv", channels, in_channels, cfg.tail_kernel,
                           weight_mean=c.tail.weight_mean, weight_std=c.tail.weight_std))
    if cfg.tail_kernel != 1:
        specs.append(LayerSpec("reflect_pad", pad=(cfg.tail_kernel - 1) // 2))
    return specs


def build_network(c: Chromosome, in_channels: int, cfg: EncodingConfig,
                  rng: np.random.Generator) -> Network:
    """Materialise the decoded layers with gene-driven Gaussian weights and zero biases."""
    layers = []
    for s in decode(c, in_channels, cfg):
        if s.kind == "conv":
            shape = (s.out_channels, s.in_channels, s.kernel_size, s.kernel_size)
            layers.append(Conv(gaussian_init(shape, s.weight_mean, s.weight_std, rng)))
        elif s.kind == "reflect_pad":
            layers.append(ReflectPad(s.pad))
        elif s.kind == "batch_norm":
            layers.append(BatchNorm(s.out_channels))
        else:
            layers.append(ReLU())
    return Network(layers)


def param_count(c: Chromosome, in_channels: int, cfg: EncodingConfig) -> int:
    """Trainable scalars: conv weights and biases plus BN gamma and beta."""
    total = 0
    for s in decode(c, in_channels, cfg):
        if s.kind == "conv":
            total += s.kernel_size * s.kernel_size * s.in_channels * s.out_channels + s.out_channels
        elif s.kind == "batch_norm":
            total += 2 * s.out_channels
    return total


# ---------------------------------------------------------------- genome files


def dumps_genome(c: Chromosome, cfg: EncodingConfig, in_channels: int | None = None) -> str:
    doc = c.to_dict()
    doc["encoding"] = encoding_to_dict(cfg)
    if in_channels is not None:
        doc["in_channels"] = in_channels
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads_genome(text: str) -> tuple[Chromosome, EncodingConfig, int | None]:
    doc = json.loads(text)
    cfg = encoding_from_dict(doc["encoding"]) if "encoding" in doc else EncodingConfig()
    return Chromosome.from_dict(doc), cfg, doc.get("in_channels")


def encoding_to_dict(cfg: EncodingConfig) -> dict:
    d = asdict(cfg)
    for key in ("kernel_sizes", "mean_range", "std_range"):
        d[key] = list(d[key])
    return d


def encoding_from_dict(d: dict) -> EncodingConfig:
    known = EncodingConfig.__dataclass_fields__
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown encoding keys: {sorted(unknown)}")
    return EncodingConfig(**d)
