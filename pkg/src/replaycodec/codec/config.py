"""Model configuration and its key = value text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Hierarchical residual codec sizes.

    Per-stage tuples are ordered coarsest stage first (stage 1 .. N).  With the
    defaults, a 32x32 image yields stage latents at 4x4 and 8x8.
    """

    stages: int = 2
    input_size: tuple = (32, 32, 3)
    stem_factor: int = 4  # downsampling from pixels to the finest stage
    latent_channels: int = 8
    feature_channels: tuple = (96, 64)
    context_channels: int = 64  # width of e_i and of the e_0 / r_0 biases
    blocks_per_stage: int = 2
    kernel_size: int = 7
    expansion: int = 2
    lambda_embed: int = 32
    variant: str = "parallel"
    lambda_low: float = 32.0
    lambda_high: float = 1024.0
    sequential_width: int = 0  # 0 = choose automatically for parameter parity
    init_seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if len(self.feature_channels) != self.stages:
            raise ValueError("feature_channels needs one entry per stage")
        if self.variant not in ("parallel", "sequential"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 < self.lambda_low <= self.lambda_high:
            raise ValueError("need 0 < lambda_low <= lambda_high")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def total_factor(self) -> int:
        """Downsampling factor from pixels to the coarsest stage."""
        return self.stem_factor * 2 ** (self.stages - 1)

    def stage_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        f = self.total_factor
        return [(height * 2 ** i // f, width * 2 ** i // f) for i in range(self.stages)]

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return dataclass_from_text(cls, text)


def dataclass_to_text(obj) -> str:
    """One ``name = value`` line per field; tuples are comma-joined."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def dataclass_from_text(cls, text: str):
    """Inverse of :func:`dataclass_to_text`; unknown keys are rejected, missing keys keep defaults.

    Field types are taken from the defaults, so every field needs one.
    """
    kv = parse_kv(text)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(kv) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, raw in kv.items():
        default = names[name].default
        if isinstance(default, tuple):
            kind = float if any(isinstance(x, float) for x in default) else int
            kw[name] = tuple(kind(x) for x in raw.split(",") if x.strip())
        elif isinstance(default, bool):
            kw[name] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kw[name] = int(raw)
        elif isinstance(default, float):
            kw[name] = float(raw)
        else:
            kw[name] = raw
    return cls(**kw)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
