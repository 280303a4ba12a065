"""Per-step reference features from an externally supplied latent.

One noise draw is mixed with the clean latent at every integer step
``t = T, T-1, ..., 0`` as ``(t/T) * noise + (1 - t/T) * latent``; each mixture is
forwarded through the model with plain attention and the QkvBundle of every
requested layer is kept. The sampler reads the cache by its step index, so
cache entry ``t`` serves sampler time ``t / T``.

Encoding pixels to a latent happens upstream; this module starts from the
latent matrix (N x latent_channels).

On disk a cache is a directory holding ``t{t:04d}_l{layer:03d}.satn`` files,
each a (3, M+N, d) tensor of stacked q/k/v rows (text first), plus
``manifest.json`` written last.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from attnshare.ditsim import VANILLA, ToyDit, embed_latent, forward, prompt_embedding
from attnshare.errors import ConfigurationError, ShapeError, ValidationError
from attnshare.sharing import QkvBundle
from attnshare.tensor import Pcg32, as_matrix, derive_seed, file_sha256, load_tensor, save_tensor

MANIFEST = "manifest.json"
CACHE_FORMAT = "attnshare-refcache/1"


@dataclass
class RefFeatureCache:
    steps: int
    layers: Tuple[int, ...]
    seed: int
    text_len: int
    entries: Dict[Tuple[int, int], QkvBundle] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def bundles_at(self, t: int) -> Dict[int, QkvBundle]:
        out = {layer: self.entries[(t, layer)] for layer in self.layers if (t, layer) in self.entries}
        if len(out) != len(self.layers):
            raise ConfigurationError(f"cache has no entries for step {t}")
        return out

    def is_complete(self) -> bool:
        want = {(t, l) for t in range(self.steps + 1) for l in self.layers}
        return set(self.entries) == want and all(b.is_finite() for b in self.entries.values())


def interpolate_noisy_latent(latent, noise, t: int, steps: int) -> np.ndarray:
    latent = as_matrix(latent, name="latent")
    noise = as_matrix(noise, name="noise")
    if latent.shape != noise.shape:
        raise ShapeError(f"latent {latent.shape} and noise {noise.shape} differ")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if not 0 <= t <= steps:
        raise ValidationError(f"t={t} outside [0, {steps}]")
    a = t / steps
    mixed = a * noise.astype(np.float64) + (1.0 - a) * latent.astype(np.float64)
    return mixed.astype(np.float32)


def reference_noise(model: ToyDit, seed: int) -> np.ndarray:
    mc = model.config
    return Pcg32(derive_seed(seed, "refcache-noise")).normal_matrix(mc.num_image_tokens, mc.latent_channels)


def cache_reference_features(
    latent,
    model: ToyDit,
    steps: int,
    layers: Iterable[int],
    seed: int,
    prompt: Optional[int] = None,
    noise: Optional[np.ndarray] = None,
) -> RefFeatureCache:
    """Build the cache; ``prompt=None`` feeds the empty prompt to the model."""
    mc = model.config
    latent = as_matrix(latent, name="latent")
    if latent.shape != (mc.num_image_tokens, mc.latent_channels):
        raise ValidationError(f"latent shape {latent.shape} != {(mc.num_image_tokens, mc.latent_channels)}")
    if int(steps) < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    layers = tuple(sorted(set(int(l) for l in layers)))
    bad = [l for l in layers if not 0 <= l < mc.layers]
    if bad:
        raise ValidationError(f"layers {bad} outside [0, {mc.layers})")
    if noise is None:
        noise = reference_noise(model, seed)
    text = prompt_embedding(model, prompt)
    cache = RefFeatureCache(steps=int(steps), layers=layers, seed=int(seed), text_len=mc.text_len)
    for t in range(steps, -1, -1):
        noisy = interpolate_noisy_latent(latent, noise, t, steps)
        _, bundles = forward(model, embed_latent(model, noisy), text, t / steps, VANILLA)
        for layer in layers:
            cache.entries[(t, layer)] = bundles[layer]
    return cache


def _entry_name(t: int, layer: int) -> str:
    return f"t{t:04d}_l{layer:03d}.satn"


def save_cache(cache: RefFeatureCache, directory, extra: Optional[dict] = None) -> Path:
    """Write bundle files, then the manifest (its presence marks a complete cache)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / MANIFEST
    if manifest_path.exists():
        manifest_path.unlink()
    files = {}
    shapes = None
    for (t, layer) in sorted(cache.entries):
        bundle = cache.entries[(t, layer)]
        name = _entry_name(t, layer)
        save_tensor(directory / name, bundle.stacked())
        files[name] = file_sha256(directory / name)
        shapes = {"text_len": bundle.text_len, "image_len": bundle.image_len, "width": bundle.width}
    manifest = {
        "format": CACHE_FORMAT,
        "steps": cache.steps,
        "layers": list(cache.layers),
        "seed": cache.seed,
        "shapes": shapes,
        "files": files,
    }
    if extra:
        manifest.update(extra)
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return directory


def load_cache(directory, verify: bool = True) -> RefFeatureCache:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise ConfigurationError(f"{directory} has no {MANIFEST}; cache missing or incomplete")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CACHE_FORMAT:
        raise ConfigurationError(f"unknown cache format {manifest.get('format')!r}")
    text_len = manifest["shapes"]["text_len"]
    cache = RefFeatureCache(steps=manifest["steps"], layers=tuple(manifest["layers"]),
                            seed=manifest["seed"], text_len=text_len)
    for t in range(cache.steps + 1):
        for layer in cache.layers:
            path = directory / _entry_name(t, layer)
            if verify and file_sha256(path) != manifest["files"][path.name]:
                raise ConfigurationError(f"checksum mismatch for {path}")
            cache.entries[(t, layer)] = QkvBundle.from_stacked(load_tensor(path), text_len)
    return cache
