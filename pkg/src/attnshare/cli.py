"""``attnshare`` command line: generate, cache-ref, ablate, analyze, selftest.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
Diagnostics go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np

from attnshare import __version__
from attnshare.analysis import (
    LocalityProfile,
    collision_experiment,
    locality_profile,
    pairwise_cosine,
    reference_attention_stats,
    style_statistics,
    write_json,
    write_pairs_csv,
    write_profile_csv,
)
from attnshare.config import RunConfig, build_run_config, merge_settings, read_config_file
from attnshare.ditsim import VANILLA, ModelConfig, init_model, predict_velocity, prompt_embedding, rf_sample
from attnshare.errors import ConfigurationError, ShapeError, ValidationError
from attnshare.refcache import cache_reference_features, load_cache, save_cache
from attnshare.sharing import SharingConfig, format_layer_spec, make_positions
from attnshare.tensor import file_sha256, load_tensor, save_tensor

log = logging.getLogger("attnshare")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
DEFAULT_LAMBDAS = (0.9, 0.95, 1.0, 1.05, 1.1, 1.15)
DEFAULT_MASKS = ("100", "010", "001")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


@contextmanager
def staged_dir(target: Path):
    """Yield a temporary sibling of ``target``; it replaces ``target`` only on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)


def _manifest(directory: Path, payload: dict) -> dict:
    files = {p.name: file_sha256(p) for p in sorted(directory.iterdir()) if p.suffix in (".satn", ".csv")}
    manifest = dict(payload, files=files, version=__version__)
    write_json(directory / "manifest.json", manifest)
    return manifest


def _add_run_flags(p: argparse.ArgumentParser, *, sampler: bool = True, sharing: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--seed")
    p.add_argument("--out")
    g = p.add_argument_group("model")
    g.add_argument("--num-layers", dest="num_layers")
    g.add_argument("--heads")
    g.add_argument("--dim")
    g.add_argument("--text-len", dest="text_len")
    g.add_argument("--grid", help="HxW, e.g. 8x8")
    g.add_argument("--latent-channels", dest="latent_channels")
    g.add_argument("--model-seed", dest="model_seed")
    if sampler:
        g = p.add_argument_group("sampler")
        g.add_argument("--steps")
        g.add_argument("--cfg-scale", dest="cfg_scale")
        g.add_argument("--prompts", help="comma-separated prompt ids; first is the reference")
    if sharing:
        g = p.add_argument_group("sharing")
        g.add_argument("--mode", choices=["vanilla", "naive", "selective"])
        g.add_argument("--lambda", dest="lambda")
        g.add_argument("--layers", help="half-open range a..b, or comma list")
        g.add_argument("--shift", choices=["identity", "shifted"])
        g.add_argument("--shift-offset", dest="shift_offset")


FLAG_KEYS = ("preset", "seed", "out", "num_layers", "heads", "dim", "text_len", "grid", "latent_channels",
             "model_seed", "steps", "cfg_scale", "prompts", "mode", "lambda", "layers", "shift",
             "shift_offset", "ref_cache")


def _run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k, None) for k in FLAG_KEYS}
    return build_run_config(merge_settings(file_values, flags)).validate()


def cmd_generate(args) -> int:
    rc = _run_config(args)
    if rc.out is None:
        raise CliError("--out is required")
    model = init_model(rc.model)
    cache = load_cache(rc.ref_cache) if rc.ref_cache else None
    if cache is not None:
        if cache.steps != rc.sampler.steps:
            raise CliError(f"cache built for {cache.steps} steps, sampler uses {rc.sampler.steps}")
        missing = sorted(set(rc.sharing.layers) - set(cache.layers))
        if missing and rc.sharing.mode != "vanilla":
            raise CliError(f"cache lacks shared layers {missing}")
    result = rf_sample(model, rc.sampler, rc.sharing, rc.seed, rc.prompts, ref_cache=cache)
    with staged_dir(rc.out) as tmp:
        streams = []
        for k, traj in enumerate(result.trajectories):
            save_tensor(tmp / f"stream{k}_trajectory.satn", traj)
            save_tensor(tmp / f"stream{k}_latent.satn", traj[-1])
            streams.append({"index": k, "role": result.roles[k], "prompt": result.prompts[k]})
        _manifest(tmp, {"command": "generate", "config": rc.to_dict(), "streams": streams})
    return EXIT_OK


def cmd_cache_ref(args) -> int:
    latent_path = Path(args.latent)
    if not latent_path.is_file():
        raise CliError(f"latent file not found: {latent_path}")
    rc = _run_config(args)
    if rc.out is None:
        raise CliError("--out is required")
    model = init_model(rc.model)
    latent = load_tensor(latent_path)
    if latent.ndim != 2:
        raise CliError(f"latent must be a matrix, got shape {latent.shape}")
    layers = rc.sharing.layers
    prompt = None if args.prompt in (None, "", "none", "empty") else int(args.prompt)
    cache = cache_reference_features(latent, model, rc.sampler.steps, layers, rc.seed, prompt=prompt)
    with staged_dir(rc.out) as tmp:
        save_cache(cache, tmp, extra={"model": rc.model.to_dict(), "prompt": prompt,
                                      "latent_sha256": file_sha256(latent_path)})
    return EXIT_OK


def _parse_floats(raw: str) -> List[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad number list {raw!r}")


def mask_layers(mask: str, model: ModelConfig) -> frozenset:
    groups = model.layer_groups(len(mask))
    if set(mask) - {"0", "1"}:
        raise CliError(f"layer-group mask must be 0/1 digits, got {mask!r}")
    return frozenset(l for bit, g in zip(mask, groups) if bit == "1" for l in g)


def ablation_cell(model, rc: RunConfig, lam: float, mask: str, baseline_finals) -> dict:
    sharing = SharingConfig(mode=rc.sharing.mode if rc.sharing.mode != "vanilla" else "selective",
                            lam=lam, layers=mask_layers(mask, rc.model), shift=rc.sharing.shift,
                            shift_offset=rc.sharing.shift_offset)
    probe = rc.sampler.steps // 2
    result = rf_sample(model, rc.sampler, sharing, rc.seed, rc.prompts, trace_steps=[probe])
    stats = []
    for (stream, _), trace in sorted(result.traces.items()):
        if stream == 0:
            continue
        for entry in trace:
            if entry["policy"] == "shared":
                stats.append(reference_attention_stats(entry["weights"], rc.model.text_len, rc.model.grid))
    finals = result.finals
    style = pairwise_cosine([style_statistics(f) for f in finals])
    ref_cos = pairwise_cosine([finals[0]] + finals[1:])
    content = [pairwise_cosine([f, b]).mean for f, b in zip(finals[1:], baseline_finals[1:])]
    return {
        "lambda": lam,
        "mask": mask,
        "layers": format_layer_spec(sharing.layers),
        "ref_mass": float(np.mean([s["ref_mass"] for s in stats])) if stats else 0.0,
        "same_coord_mass": float(np.mean([s["same_coord_mass"] for s in stats])) if stats else 0.0,
        "style_cosine": style.mean,
        "ref_cosine": float(np.mean([c for i, j, c in ref_cos.pairs if i == 0])),
        "content_cosine": float(np.mean(content)),
    }


ABLATE_COLUMNS = ("lambda", "mask", "layers", "ref_mass", "same_coord_mass", "style_cosine",
                  "ref_cosine", "content_cosine")


def cmd_ablate(args) -> int:
    lambdas = _parse_floats(args.lambdas)
    masks = [m.strip() for m in args.masks.split(",") if m.strip()]
    if not lambdas or not masks:
        raise CliError("ablation grid is empty")
    if any(l <= 0 for l in lambdas):
        raise CliError("lambda values must be positive")
    if len({len(m) for m in masks}) != 1:
        raise CliError("all layer-group masks must have the same length")
    rc = _run_config(args)
    if rc.out is None:
        raise CliError("--out is required")
    if len(rc.prompts) < 2:
        raise CliError("ablation needs a reference and at least one target prompt")
    for m in masks:
        mask_layers(m, rc.model)
    model = init_model(rc.model)
    baseline = rf_sample(model, rc.sampler, VANILLA, rc.seed, rc.prompts)
    rows = [ablation_cell(model, rc, lam, mask, baseline.finals) for mask in masks for lam in lambdas]
    base_style = pairwise_cosine([style_statistics(f) for f in baseline.finals]).mean
    with staged_dir(rc.out) as tmp:
        with open(tmp / "ablation.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        _manifest(tmp, {"command": "ablate", "config": rc.to_dict(), "lambdas": lambdas, "masks": masks,
                        "groups": [[g.start, g.stop] for g in rc.model.layer_groups(len(masks[0]))],
                        "baseline": {"style_cosine": base_style}})
    return EXIT_OK


def _profile_from_run(run_dir: Path, manifest: dict, rc: RunConfig, out: Path) -> dict:
    """Locality profile of the centre query at the first shared layer, mid-trajectory."""
    model = init_model(rc.model)
    streams = manifest["streams"]
    if len(streams) < 2 or streams[0]["role"] != "reference":
        return {}
    step = rc.sampler.steps // 2
    t = 1.0 - step / rc.sampler.steps
    ref_lat = load_tensor(run_dir / "stream0_trajectory.satn")[step]
    tar_lat = load_tensor(run_dir / "stream1_trajectory.satn")[step]
    _, ref_bundles = predict_velocity(model, ref_lat, prompt_embedding(model, streams[0]["prompt"]), t)
    layers = rc.sharing.layers or frozenset(range(rc.model.layers))
    layer = min(layers)
    h, w = rc.model.grid
    query = (h // 2, w // 2)
    q_index = rc.model.text_len + query[0] * w + query[1]
    summary = {"layer": layer, "step": step, "query": list(query)}
    for shift in ("identity", "shifted"):
        sc = SharingConfig(mode="selective", lam=rc.sharing.lam, layers=layers, shift=shift,
                           shift_offset=rc.sharing.shift_offset)
        trace = []
        predict_velocity(model, tar_lat, prompt_embedding(model, streams[1]["prompt"]), t, sc,
                         ref_bundles, make_positions(rc.model.grid, rc.model.text_len, sc), trace)
        weights = trace[layer]["weights"]
        n = h * w
        row = weights[:, q_index, :].mean(axis=0)
        prof = locality_profile(row[-n:], query, rc.model.grid, row_total=float(row.sum()))
        write_profile_csv(out / f"profile_{shift}.csv", prof)
        summary[shift] = {"ref_mass": prof.total, "row_total": prof.row_total, "d0": prof.mass[0]}
    return summary


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise CliError(f"run directory missing or incomplete: {run_dir}")
    if args.trials < 1:
        raise CliError("--trials must be >= 1")
    manifest = json.loads(manifest_path.read_text())
    cfg = manifest["config"]
    values = {
        "num_layers": str(cfg["model"]["layers"]), "heads": str(cfg["model"]["heads"]),
        "dim": str(cfg["model"]["dim"]), "text_len": str(cfg["model"]["text_len"]),
        "grid": "x".join(str(g) for g in cfg["model"]["grid"]),
        "latent_channels": str(cfg["model"]["latent_channels"]), "model_seed": str(cfg["model"]["seed"]),
        "rope_base": str(cfg["model"]["rope_base"]),
        "steps": str(cfg["sampler"]["steps"]), "cfg_scale": str(cfg["sampler"]["cfg_scale"]),
        "mode": cfg["sharing"]["mode"], "lambda": str(cfg["sharing"]["lambda"]),
        "layers": cfg["sharing"]["layers"], "shift": cfg["sharing"]["shift"], "seed": str(cfg["seed"]),
    }
    if cfg["sharing"].get("shift_offset") is not None:
        values["shift_offset"] = str(cfg["sharing"]["shift_offset"])
    rc = build_run_config(values)
    out = Path(args.out) if args.out else run_dir / "analysis"
    seed = rc.seed if args.seed is None else int(args.seed)
    with staged_dir(out) as tmp:
        collision = collision_experiment(rc.model, trials=args.trials, seed=seed)
        write_profile_csv(tmp / "collision_identity.csv",
                          locality_profile_from_mean(collision.identity_mean_profile))
        write_profile_csv(tmp / "collision_shifted.csv",
                          locality_profile_from_mean(collision.shifted_mean_profile))
        summary = {
            "run": str(run_dir),
            "config": cfg,
            "collision": {k: v for k, v in collision.to_dict().items() if k != "per_trial"},
            "profile": _profile_from_run(run_dir, manifest, rc, tmp),
        }
        if args.embeddings:
            path = Path(args.embeddings)
            if not path.is_file():
                raise CliError(f"embedding file not found: {path}")
            emb = load_tensor(path)
            if emb.ndim != 2:
                raise CliError(f"embeddings must be a matrix (one vector per row), got {emb.shape}")
            report = pairwise_cosine(list(emb))
            write_pairs_csv(tmp / "pairs.csv", report)
            summary["pairwise_cosine"] = {"mean": report.mean, "count": report.count}
        write_json(tmp / "summary.json", summary)
    return EXIT_OK


def locality_profile_from_mean(mass: List[float]) -> LocalityProfile:
    return LocalityProfile(query=(-1, -1), distances=list(range(len(mass))), mass=list(mass))


def cmd_selftest(args) -> int:
    from attnshare.selftest import run_selftest

    failures = run_selftest(stream=sys.stderr)
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnshare", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a reference plus target streams")
    _add_run_flags(p)
    p.add_argument("--ref-cache", dest="ref_cache", help="use a cached external reference")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cache-ref", help="cache per-step reference features from a latent file")
    _add_run_flags(p, sharing=False)
    p.add_argument("--latent", required=True, help="SATN matrix, N x latent_channels")
    p.add_argument("--layers", help="layers to cache, a..b or comma list")
    p.add_argument("--prompt", help="prompt id fed with the latent (default: empty prompt)")
    p.set_defaults(func=cmd_cache_ref)

    p = sub.add_parser("ablate", help="lambda x layer-group ablation grid")
    _add_run_flags(p)
    p.add_argument("--lambdas", default=",".join(str(l) for l in DEFAULT_LAMBDAS))
    p.add_argument("--masks", default=",".join(DEFAULT_MASKS),
                   help="comma list of 0/1 masks over equal layer groups, e.g. 100,010,001")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="collision experiment and locality profiles for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed")
    p.add_argument("--embeddings", help="SATN matrix of embedding vectors, one per row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="attnshare: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ValidationError, ConfigurationError, ShapeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.error("failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
