"""Attention locality diagnostics and pairwise-cosine consistency metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from attnshare.ditsim import ModelConfig
from attnshare.errors import ShapeError, ValidationError
from attnshare.position import grid_coords
from attnshare.sharing import QkvBundle, SharingConfig, make_positions, shared_mm_attention
from attnshare.tensor import Pcg32, derive_seed


@dataclass
class LocalityProfile:
    query: Tuple[int, int]
    distances: List[int]
    mass: List[float]
    row_total: Optional[float] = None  # full softmax row mass (text + target + reference keys)

    @property
    def total(self) -> float:
        return float(sum(self.mass))

    def beyond(self, distance: int = 0) -> float:
        return float(sum(self.mass[distance + 1:]))


def locality_profile(attn_row, query: Tuple[int, int], grid: Tuple[int, int],
                     row_total: Optional[float] = None) -> LocalityProfile:
    """Bucket reference-key attention weights by L1 grid distance from ``query``."""
    h, w = grid
    row = np.asarray(attn_row, dtype=np.float64).ravel()
    if row.size != h * w:
        raise ShapeError(f"attention row has {row.size} entries, grid {grid} has {h * w}")
    if np.any(row < 0):
        raise ValidationError("attention weights must be non-negative")
    coords = grid_coords(grid)
    dist = np.abs(coords[:, 0] - query[0]) + np.abs(coords[:, 1] - query[1])
    mass = np.bincount(dist, weights=row, minlength=(h - 1) + (w - 1) + 1)
    return LocalityProfile(query=(int(query[0]), int(query[1])),
                           distances=list(range(len(mass))), mass=[float(m) for m in mass],
                           row_total=row_total)


def reference_attention_stats(weights: np.ndarray, text_len: int, grid: Tuple[int, int]) -> dict:
    """Summaries of a shared layer's (heads, M+N, keys) weights; reference image keys are the last N.

    ``ref_mass``: mean total weight an image query puts on reference image keys.
    ``same_coord_mass``: mean weight on the reference key at the query's own coordinates.
    """
    n = grid[0] * grid[1]
    w = np.asarray(weights, dtype=np.float64)
    ref = w[:, text_len:text_len + n, -n:]
    diag = np.diagonal(ref, axis1=1, axis2=2)
    return {"ref_mass": float(ref.sum(axis=2).mean()), "same_coord_mass": float(diag.mean())}


def _sign_test_p(wins: int, losses: int) -> float:
    """One-sided binomial sign test P(X >= wins), X ~ Bin(wins + losses, 1/2); ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


@dataclass
class CollisionSummary:
    trials: int
    seed: int
    identity_mean_d0: float
    shifted_mean_d0: float
    identity_mean_ref_mass: float
    shifted_mean_ref_mass: float
    wins: int  # trials where identity distance-0 mass > shifted
    ties: int
    sign_test_p: float
    shifted_min_beyond0: float
    identity_mean_profile: List[float] = field(default_factory=list)
    shifted_mean_profile: List[float] = field(default_factory=list)
    per_trial: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _collision_trial(cfg: ModelConfig, seed: int, trial: int):
    rng = Pcg32(derive_seed(seed, "collision", trial))
    m, n, d_k = cfg.text_len, cfg.num_image_tokens, cfg.head_dim
    txt = rng.normal_matrix(m, d_k)
    img = rng.normal_matrix(n, d_k)
    # queries equal keys and the reference content equals the target content
    bundle = QkvBundle(txt, txt, txt, img, img, img)
    p = int(rng.u32_array(1)[0] % n)
    query = (p // cfg.grid[1], p % cfg.grid[1])
    out = {}
    for shift in ("identity", "shifted"):
        sc = SharingConfig(mode="selective", lam=1.0, shift=shift)
        positions = make_positions(cfg.grid, m, sc)
        _, weights = shared_mm_attention(bundle, bundle, sc, positions, heads=1,
                                         return_weights=True)
        row = weights[0, m + p]
        out[shift] = locality_profile(row[-n:], query, cfg.grid, row_total=float(row.sum()))
    return query, out


def collision_experiment(cfg: Optional[ModelConfig] = None, trials: int = 200, seed: int = 0) -> CollisionSummary:
    """Distance-0 reference mass for one random query per trial, identity vs shifted reference positions."""
    cfg = cfg or ModelConfig()
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    per_trial = []
    prof = {"identity": [], "shifted": []}
    for trial in range(trials):
        query, res = _collision_trial(cfg, seed, trial)
        for k in prof:
            prof[k].append(res[k].mass)
        per_trial.append({
            "trial": trial,
            "query": list(query),
            "identity_d0": res["identity"].mass[0],
            "shifted_d0": res["shifted"].mass[0],
            "identity_ref_mass": res["identity"].total,
            "shifted_ref_mass": res["shifted"].total,
            "shifted_beyond0": res["shifted"].beyond(0),
        })
    ident = np.array([r["identity_d0"] for r in per_trial])
    shif = np.array([r["shifted_d0"] for r in per_trial])
    wins, losses = int(np.sum(ident > shif)), int(np.sum(ident < shif))
    return CollisionSummary(
        trials=trials,
        seed=seed,
        identity_mean_d0=float(ident.mean()),
        shifted_mean_d0=float(shif.mean()),
        identity_mean_ref_mass=float(np.mean([r["identity_ref_mass"] for r in per_trial])),
        shifted_mean_ref_mass=float(np.mean([r["shifted_ref_mass"] for r in per_trial])),
        wins=wins,
        ties=trials - wins - losses,
        sign_test_p=_sign_test_p(wins, losses),
        shifted_min_beyond0=float(min(r["shifted_beyond0"] for r in per_trial)),
        identity_mean_profile=[float(x) for x in np.mean(prof["identity"], axis=0)],
        shifted_mean_profile=[float(x) for x in np.mean(prof["shifted"], axis=0)],
        per_trial=per_trial,
    )


@dataclass
class MetricReport:
    pairs: List[Tuple[int, int, float]]
    mean: float
    count: int


def pairwise_cosine(embeddings: Sequence) -> MetricReport:
    """Mean cosine similarity over all unordered pairs of embedding vectors."""
    vecs = [np.asarray(e, dtype=np.float64).ravel() for e in embeddings]
    if len(vecs) < 2:
        raise ValidationError("pairwise_cosine needs at least two vectors")
    if len({v.size for v in vecs}) != 1:
        raise ShapeError("embedding vectors differ in length")
    norms = [float(np.linalg.norm(v)) for v in vecs]
    if any(nm == 0 or not math.isfinite(nm) for nm in norms):
        raise ValidationError("embeddings must be finite and nonzero")
    pairs = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            cos = float(np.dot(vecs[i], vecs[j]) / (norms[i] * norms[j]))
            pairs.append((i, j, min(1.0, max(-1.0, cos))))
    return MetricReport(pairs=pairs, mean=float(np.mean([p[2] for p in pairs])), count=len(pairs))


def style_statistics(latent) -> np.ndarray:
    """Per-channel mean and std of a latent, concatenated; a desk-scale style descriptor."""
    x = np.asarray(latent, dtype=np.float64)
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def write_profile_csv(path, profile: LocalityProfile) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["distance", "mass"])
        for d, m in zip(profile.distances, profile.mass):
            writer.writerow([d, repr(float(m))])


def write_pairs_csv(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["i", "j", "cosine"])
        for i, j, c in report.pairs:
            writer.writerow([i, j, repr(float(c))])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
