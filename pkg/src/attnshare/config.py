"""Run configuration: flat ``key = value`` files merged with command-line overrides.

Grammar, one setting per line::

    # comment
    mode = selective        # vanilla | naive | selective
    lambda = 1.1
    layers = 19..57         # half-open ranges, comma lists, or empty
    shift = shifted         # identity | shifted
    grid = 8x8

Unknown keys are rejected. Precedence is defaults < preset < file < flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from attnshare.ditsim import ModelConfig, SamplerConfig
from attnshare.errors import ConfigurationError, ValidationError
from attnshare.sharing import SharingConfig, format_layer_spec, parse_layer_spec

PRESETS: Dict[str, Dict[str, str]] = {
    # Flux.1-dev depth and the published sharing settings, at toy width.
    "paper": {"num_layers": "57", "layers": "19..57", "lambda": "1.1", "steps": "30",
              "cfg_scale": "3.5", "mode": "selective", "shift": "shifted"},
    "desk": {},
}

KEYS = {
    "preset", "mode", "lambda", "layers", "shift", "shift_offset", "steps", "cfg_scale", "seed",
    "out", "num_layers", "heads", "dim", "text_len", "grid", "latent_channels", "model_seed",
    "prompts", "ref_cache", "rope_base",
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> Dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def _int(values, key, default):
    raw = values.get(key)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{key} must be an integer, got {raw!r}")


def _float(values, key, default):
    raw = values.get(key)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"{key} must be a number, got {raw!r}")


def parse_grid(raw: str):
    try:
        h, w = (int(x) for x in raw.lower().split("x"))
    except ValueError:
        raise ValidationError(f"grid must look like 8x8, got {raw!r}")
    return h, w


def parse_prompts(raw: str) -> List[Optional[int]]:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if part in ("", "none", "empty"):
            out.append(None)
        else:
            try:
                out.append(int(part))
            except ValueError:
                raise ValidationError(f"prompt ids must be integers, got {part!r}")
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    sampler: SamplerConfig
    sharing: SharingConfig
    seed: int = 0
    prompts: List[Optional[int]] = field(default_factory=lambda: [0, 1, 2, 3])
    out: Optional[Path] = None
    ref_cache: Optional[Path] = None

    def validate(self) -> "RunConfig":
        self.sharing.check_layers(self.model.layers)
        if self.ref_cache is not None and not Path(self.ref_cache).is_dir():
            raise ValidationError(f"reference cache directory not found: {self.ref_cache}")
        if not self.prompts:
            raise ValidationError("at least one prompt is required")
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sampler": {"steps": self.sampler.steps, "cfg_scale": self.sampler.cfg_scale},
            "sharing": {
                "mode": self.sharing.mode,
                "lambda": self.sharing.lam,
                "layers": format_layer_spec(self.sharing.layers),
                "shift": self.sharing.shift,
                "shift_offset": self.sharing.shift_offset,
            },
            "seed": self.seed,
            "prompts": self.prompts,
            "ref_cache": str(self.ref_cache) if self.ref_cache else None,
        }


def merge_settings(file_values: Dict[str, str], flag_values: Dict[str, Optional[str]]) -> Dict[str, str]:
    flags = {k: v for k, v in flag_values.items() if v is not None}
    preset = flags.get("preset", file_values.get("preset", "desk"))
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    merged.update(file_values)
    merged.update(flags)
    merged["preset"] = preset
    return merged


def build_run_config(values: Dict[str, str]) -> RunConfig:
    base = ModelConfig()
    grid = parse_grid(values["grid"]) if values.get("grid") else base.grid
    model = ModelConfig(
        layers=_int(values, "num_layers", base.layers),
        heads=_int(values, "heads", base.heads),
        dim=_int(values, "dim", base.dim),
        text_len=_int(values, "text_len", base.text_len),
        grid=grid,
        latent_channels=_int(values, "latent_channels", base.latent_channels),
        seed=_int(values, "model_seed", base.seed),
        rope_base=_float(values, "rope_base", base.rope_base),
    )
    sampler = SamplerConfig(steps=_int(values, "steps", 30), cfg_scale=_float(values, "cfg_scale", 3.5))
    if "layers" in values:
        layers = parse_layer_spec(values["layers"])
    else:
        # groups 2 and 3 of three, the desk-scale counterpart of the single-block range
        groups = model.layer_groups(3)
        layers = frozenset(range(groups[1].start, model.layers))
    shift_offset = _int(values, "shift_offset", None)
    sharing = SharingConfig(
        mode=values.get("mode", "selective"),
        lam=_float(values, "lambda", 1.1),
        layers=layers,
        shift=values.get("shift", "shifted"),
        shift_offset=shift_offset,
    )
    try:
        sharing.check_layers(model.layers)
    except ConfigurationError as exc:
        raise ValidationError(str(exc))
    return RunConfig(
        model=model,
        sampler=sampler,
        sharing=sharing,
        seed=_int(values, "seed", 0),
        prompts=parse_prompts(values["prompts"]) if values.get("prompts") else [0, 1, 2, 3],
        out=Path(values["out"]) if values.get("out") else None,
        ref_cache=Path(values["ref_cache"]) if values.get("ref_cache") else None,
    )
