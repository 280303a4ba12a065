"""Fast invariant checks bundled with the package (``attnshare selftest``)."""

from __future__ import annotations

import math
import sys
import time
from typing import Callable, List, Tuple

import numpy as np

from attnshare.analysis import collision_experiment, locality_profile, pairwise_cosine
from attnshare.ditsim import ModelConfig, SamplerConfig, euler_integrate, init_model, rf_sample
from attnshare.position import RopeParams, build_positions, rope_rotate
from attnshare.refcache import cache_reference_features, interpolate_noisy_latent
from attnshare.sharing import (
    QkvBundle,
    SharingConfig,
    adain,
    make_positions,
    naive_share,
    selective_share,
    shared_mm_attention,
)
from attnshare.tensor import Pcg32, channel_stats, dumps_tensor, loads_tensor, matmul, row_softmax


def _bundle(rng: Pcg32, m: int, n: int, d: int) -> QkvBundle:
    return QkvBundle(*(rng.normal_matrix(r, d) for r in (m, m, m, n, n, n)))


def check_kernels():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]]), [[19, 22], [43, 50]])
    assert np.allclose(row_softmax([[0.0, math.log(3.0)]]), [[0.25, 0.75]], atol=1e-7)
    mean, std = channel_stats([[1.0], [3.0]])
    assert mean[0] == 2.0 and std[0] == 1.0
    a = [Pcg32(42, 54).next_u32() for _ in range(1)]
    assert a == [0xA15C02B7]


def check_tensor_roundtrip():
    x = Pcg32(1).normal_matrix(5, 7)
    assert loads_tensor(dumps_tensor(x)).tobytes() == x.tobytes()


def check_positions():
    for h in range(1, 9):
        for w in range(1, 9):
            tar = {tuple(e) for e in build_positions((h, w), 0).image}
            ref = {tuple(e) for e in build_positions((h, w), 0, shift=w).image}
            assert not tar & ref
    params = RopeParams(head_dim=8)
    table = build_positions((3, 3), 2, shift=3)
    v = Pcg32(3).normal_matrix(len(table), 8)
    out = rope_rotate(v, table, params)
    assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1), atol=1e-5)


def check_sharing_shapes():
    rng = Pcg32(5)
    tar, ref = _bundle(rng, 2, 4, 8), _bundle(rng, 2, 4, 8)
    qf, kf, vf = naive_share(tar, ref)
    assert qf.shape == (6, 8) and kf.shape == (12, 8) and vf.shape == (12, 8)
    qf, kf, vf = selective_share(tar, ref, 1.1)
    assert qf.shape == (6, 8) and kf.shape == (10, 8) and vf.shape == (10, 8)
    y = adain(tar.k_img, ref.k_img)
    assert np.allclose(channel_stats(y)[0], channel_stats(ref.k_img)[0], atol=1e-5)


def check_text_isolation():
    rng = Pcg32(6)
    tar, ref = _bundle(rng, 2, 4, 8), _bundle(rng, 2, 4, 8)
    poisoned = QkvBundle(ref.q_txt, np.full_like(ref.k_txt, np.nan), np.full_like(ref.v_txt, np.nan),
                         ref.q_img, ref.k_img, ref.v_img)
    assert all(np.all(np.isfinite(a)) for a in selective_share(tar, poisoned, 1.1))
    assert not np.all(np.isfinite(naive_share(tar, poisoned)[1]))


def check_attention_rows():
    rng = Pcg32(7)
    tar, ref = _bundle(rng, 2, 4, 8), _bundle(rng, 2, 4, 8)
    for mode in ("vanilla", "naive", "selective"):
        cfg = SharingConfig(mode=mode)
        _, w = shared_mm_attention(tar, ref, cfg, make_positions((2, 2), 2, cfg), return_weights=True)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def check_sampler():
    target = Pcg32(8).normal_matrix(4, 3)
    noise = Pcg32(9).normal_matrix(4, 3)
    for steps in (1, 5, 30):
        traj = euler_integrate(noise, lambda x, t, k: noise - target, steps)
        assert np.allclose(traj[-1], target, atol=1e-4)


def check_refcache():
    cfg = ModelConfig(layers=3, heads=1, dim=8, text_len=2, grid=(2, 2), latent_channels=2)
    model = init_model(cfg)
    latent = Pcg32(10).normal_matrix(4, 2)
    noise = Pcg32(11).normal_matrix(4, 2)
    assert np.array_equal(interpolate_noisy_latent(latent, noise, 3, 3), noise)
    assert np.array_equal(interpolate_noisy_latent(latent, noise, 0, 3), latent)
    cache = cache_reference_features(latent, model, 3, [1, 2], seed=0)
    assert len(cache) == 8 and cache.is_complete()


def check_determinism():
    cfg = ModelConfig(layers=2, heads=1, dim=8, text_len=2, grid=(2, 2), latent_channels=2)
    model = init_model(cfg)
    sharing = SharingConfig(layers={1})
    a = rf_sample(model, SamplerConfig(steps=3), sharing, seed=4, prompts=[0, 1])
    b = rf_sample(init_model(cfg), SamplerConfig(steps=3), sharing, seed=4, prompts=[0, 1])
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.trajectories, b.trajectories))


def check_collision():
    s = collision_experiment(ModelConfig(), trials=50, seed=0)
    assert s.identity_mean_d0 > s.shifted_mean_d0 and s.shifted_min_beyond0 > 0


def check_metrics():
    assert abs(pairwise_cosine([[1, 0], [1, 1], [0, 1]]).mean - (2 * math.sqrt(0.5)) / 3) < 1e-12
    prof = locality_profile([0.25] * 4, (0, 0), (2, 2))
    assert np.allclose(prof.mass, [0.25, 0.5, 0.25])


CHECKS: List[Tuple[str, Callable[[], None]]] = [
    ("kernels", check_kernels),
    ("tensor file round-trip", check_tensor_roundtrip),
    ("shifted positions", check_positions),
    ("sharing shapes and AdaIN", check_sharing_shapes),
    ("text isolation", check_text_isolation),
    ("attention rows normalized", check_attention_rows),
    ("straight-line sampler", check_sampler),
    ("reference cache", check_refcache),
    ("determinism", check_determinism),
    ("collision direction", check_collision),
    ("metrics", check_metrics),
]


def run_selftest(stream=sys.stdout) -> int:
    failures = 0
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # noqa: BLE001
            failures += 1
            status = f"FAIL ({type(exc).__name__}: {exc})"
        print(f"{status:4s}  {name}  [{time.perf_counter() - start:.2f}s]", file=stream)
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed", file=stream)
    return failures
