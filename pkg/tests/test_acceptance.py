"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import itertools
import time

import numpy as np
import pytest

from rangediff import norm
from rangediff.boxes import (Box3D, CameraModel, mask_complement, project_box_camera,
                             rasterize_mask, zoom_viewport_camera)
from rangediff.denoiser import (DenoiserConfig, TrainConfig, backward, forward, init_params,
                                sample, sample_ring, train)
from rangediff.diffusion import (NoiseSchedule, cfg_combine, ddim_sample, ddpm_sample,
                                 make_linear_schedule, mu_from_eps, posterior_params)
from rangediff.imageops import range_composite
from rangediff.metrics import MaskedPair, intensity_mse, median_depth_error, moment_match
from rangediff.rangeview import PointCloud, project, reconstruct
from rangediff.scenes import SceneConfig, collision_free_cloud, synth_scene


# -- 1 ----------------------------------------------------------------------

def test_codec_roundtrip(verdict):
    rng = np.random.default_rng(1)
    sizes = np.unique(np.geomspace(1e3, 1e5, 100).astype(int))
    sizes = np.concatenate([sizes, rng.integers(1000, 100_001, 100 - sizes.size)])
    clouds = [collision_free_cloud(np.random.default_rng(s), int(n))[0]
              for s, n in enumerate(sizes)]

    worst, elapsed, counts_ok = 0.0, 0.0, True
    for cloud in clouds:
        t0 = time.perf_counter()
        rec = reconstruct(project(cloud))
        elapsed += time.perf_counter() - t0
        d = np.linalg.norm(cloud.xyz, axis=1)
        ref = cloud.points[(d >= 1.4) & (d <= 54.0)]
        counts_ok &= len(ref) == len(rec)
        if len(ref) != len(rec):
            continue
        a = ref[np.argsort(ref[:, 0], kind="stable")]
        b = rec.points[np.argsort(rec.points[:, 0], kind="stable")]
        worst = max(worst, float(np.abs(a[:, :3] - b[:, :3]).max()))

    ok = counts_ok and worst < 1e-6 and elapsed < 5.0
    verdict(1, ok, f"{len(clouds)} clouds, max coord error {worst:.2e} m, "
                   f"project+reconstruct {elapsed:.2f} s")
    assert counts_ok and worst < 1e-6 and elapsed < 5.0


# -- 2 ----------------------------------------------------------------------

def test_normalisation_inverses(verdict):
    rng = np.random.default_rng(2)
    n = 1_000_000
    errs = {}
    d = np.concatenate([[1.4, 54.0], rng.uniform(1.4, 54.0, n - 2)])
    errs["depth_linear"] = np.abs(norm.depth_linear_denorm(norm.depth_linear_norm(d)) - d).max()
    for alpha in (0.3, 0.5, 0.7):
        lo, hi = np.sort(rng.uniform(-1, 1, 2))
        p = norm.DepthNormParams(alpha, lo, hi)
        x = np.concatenate([[-1.0, lo, hi, 1.0], rng.uniform(-1, 1, n - 4)])
        errs[f"depth_object a={alpha}"] = np.abs(
            norm.depth_object_denorm(norm.depth_object_norm(x, p), p) - x).max()
    for lam in (1, 4, 8):
        i = np.concatenate([[0.0, 255.0], rng.uniform(0, 255, n - 2)])
        errs[f"intensity l={lam}"] = np.abs(
            norm.intensity_denorm(norm.intensity_norm(i, lam), lam) - i).max()

    exact = True
    for f in (2, 4, 16):
        g = rng.normal(size=(64, 96)) * 10
        exact &= np.array_equal(norm.avg_pool_downscale(norm.nn_upscale(g, f), f), g)

    worst = max(errs.values())
    ok = worst < 1e-9 and exact
    verdict(2, ok, f"max inverse error {worst:.2e} over {len(errs)} maps; "
                   f"pool(upscale) bit-exact={exact}")
    assert all(v < 1e-9 for v in errs.values()), errs
    assert exact


# -- 3 ----------------------------------------------------------------------

def test_forward_marginal_matches_closed_form(verdict):
    rng = np.random.default_rng(3)
    n = 100_000
    failures = []
    worst_z = 0.0
    for case in range(20):
        T = int(rng.integers(10, 300))
        betas = np.sort(rng.uniform(1e-4, 0.05, T))
        s = NoiseSchedule.from_betas(betas)
        t = int(rng.integers(1, T + 1))
        x0 = float(rng.normal(0, 2))
        x = np.full(n, x0)
        for k in range(t):
            x = np.sqrt(1 - betas[k]) * x + np.sqrt(betas[k]) * rng.standard_normal(n)
        ab = np.prod(1 - betas[:t])
        mean, var = np.sqrt(ab) * x0, 1 - ab
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        z_m = abs(x.mean() - mean) / se_mean
        z_v = abs(x.var(ddof=1) - var) / se_var
        worst_z = max(worst_z, z_m, z_v)
        if z_m >= 3 or z_v >= 3:
            failures.append((case, T, t, z_m, z_v))
        assert np.isclose(s.ab(t), ab, rtol=1e-12)

    ok = not failures
    verdict(3, ok, f"20 cases x 1e5 chains, worst deviation {worst_z:.2f} SE (limit 3)")
    assert ok, failures


# -- 4 ----------------------------------------------------------------------

def _grid_posterior(x0, xt, t, s):
    """Mean/variance of x_{t-1} from the product of the two Gaussian factors on a grid."""
    a, b = s.a(t), s.b(t)
    ab_prev = s.ab(t - 1)

    def logp(g):
        return (-0.5 * (xt - np.sqrt(a) * g) ** 2 / b
                - 0.5 * (g - np.sqrt(ab_prev) * x0) ** 2 / (1 - ab_prev))

    g = np.linspace(-60, 60, 2_000_001)
    for _ in range(2):
        w = np.exp(logp(g) - logp(g).max())
        w /= w.sum()
        m = np.sum(w * g)
        v = np.sum(w * (g - m) ** 2)
        g = np.linspace(m - 12 * np.sqrt(v), m + 12 * np.sqrt(v), 400_001)
    return m, v


def test_posterior_oracle(verdict):
    rng = np.random.default_rng(4)
    worst_fit = 0.0
    for _ in range(20):
        T = int(rng.integers(5, 1000))
        s = NoiseSchedule.from_betas(np.sort(rng.uniform(1e-4, 0.05, T)))
        t = int(rng.integers(2, T + 1))
        x0, xt = rng.normal(0, 1.5, 2)
        m, v = _grid_posterior(x0, xt, t, s)
        mean, var = posterior_params(np.array([x0]), np.array([xt]), t, s)
        worst_fit = max(worst_fit, abs(mean[0] - m), abs(var - v))

    s = make_linear_schedule(1000)
    worst_id = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, 1001))
        xt, eps = rng.normal(size=(2, 3))
        x0 = (xt - np.sqrt(1 - s.ab(t)) * eps) / np.sqrt(s.ab(t))
        mean, _ = posterior_params(x0, xt, t, s)
        worst_id = max(worst_id, float(np.abs(mean - mu_from_eps(xt, eps, t, s)).max()))

    ok = worst_fit < 1e-4 and worst_id < 1e-12
    verdict(4, ok, f"grid fit error {worst_fit:.2e} (limit 1e-4), "
                   f"eps-mean identity {worst_id:.2e} (limit 1e-12)")
    assert worst_fit < 1e-4
    assert worst_id < 1e-12


# -- 5 ----------------------------------------------------------------------

def test_exact_eps_recovers_x0(verdict):
    rng = np.random.default_rng(5)
    T = 1000
    s = make_linear_schedule(T)
    x0 = rng.normal(size=(64, 2))
    x_T = rng.normal(size=x0.shape)

    def oracle(x, t):
        return (x - np.sqrt(s.ab(t)) * x0) / np.sqrt(1 - s.ab(t))

    zeros = (np.zeros_like(x0) for _ in range(T))
    ddpm_err = float(np.abs(ddpm_sample(oracle, x_T, s, zeros) - x0).max())
    divisors = [k for k in range(1, T + 1) if T % k == 0]
    ddim_err = max(float(np.abs(ddim_sample(oracle, x_T, s, k) - x0).max()) for k in divisors)

    ok = ddpm_err < 1e-6 and ddim_err < 1e-9
    verdict(5, ok, f"DDPM error {ddpm_err:.2e} (limit 1e-6), DDIM error {ddim_err:.2e} "
                   f"over {len(divisors)} strides (limit 1e-9)")
    assert ddpm_err < 1e-6
    assert ddim_err < 1e-9


# -- 6 ----------------------------------------------------------------------

def test_gradient_check(verdict):
    rng = np.random.default_rng(6)
    cfg = DenoiserConfig(data_dim=2, hidden=(64, 64), embed_dim=16, d_tok=8, T=200)
    s = make_linear_schedule(200, 5e-4, 0.1)
    params = init_params(cfg, rng)
    # move away from the zero gate so the adapter weights receive gradient
    for name, arr in params.arrays.items():
        params.arrays[name] = arr + 0.1 * rng.normal(size=arr.shape)
    params.arrays["gate"] = np.asarray(0.7)
    B = 5
    batch = dict(x0=rng.normal(size=(B, 2)), t=rng.integers(1, 201, B),
                 noise=rng.normal(size=(B, 2)), c=rng.normal(size=(B, 4, 8)), schedule=s)
    _, grads = backward(batch, params)

    delta, worst, where = 1e-5, 0.0, None
    for name, arr in params.arrays.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            lp, _ = backward(batch, params)
            flat[i] = orig - delta
            lm, _ = backward(batch, params)
            flat[i] = orig
            num = (lp - lm) / (2 * delta)
            ana = grads[name].reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            if rel > worst:
                worst, where = rel, (name, i)

    ok = worst < 1e-4
    verdict(6, ok, f"{params.n_params()} parameters, max relative error {worst:.2e} "
                   f"at {where} (limit 1e-4)")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_zero_gate_identity(verdict):
    rng = np.random.default_rng(7)
    cfg = DenoiserConfig(hidden=(64, 64), embed_dim=16, d_tok=16, T=200)
    params = init_params(cfg, rng)
    x = rng.normal(size=(256, 2))
    t = rng.integers(1, 201, 256)
    eps_u = forward(x, t, None, params)
    same, cfg_same = True, True
    for m in (1, 3, 7):
        c = rng.normal(0, 5, size=(256, m, 16))
        eps_c = forward(x, t, c, params)
        same &= np.array_equal(eps_c, eps_u)
        for scale in (0.0, 1.0, 5.0, -3.0, 1e3):
            cfg_same &= np.array_equal(cfg_combine(eps_c, eps_u, scale), eps_u)

    ok = same and cfg_same
    verdict(7, ok, f"forward identical with/without tokens={same}; cfg_combine == uncond={cfg_same}")
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_toy_generation_quality(verdict):
    t0 = time.perf_counter()
    schedule = make_linear_schedule(200, 5e-4, 0.1)
    net = DenoiserConfig(hidden=(128, 128), embed_dim=16, d_tok=16, T=200)
    result = train(net, TrainConfig(steps=20_000, batch=128), schedule, seed=0)
    gen = sample(result.params, schedule, 10_000, np.random.default_rng(100),
                 sampler="ddim", steps=50)
    data, _ = sample_ring(10_000, np.random.default_rng(101))
    mean_gap, cov_gap = moment_match(gen, data)
    elapsed = time.perf_counter() - t0

    ok = mean_gap < 0.15 and cov_gap < 0.3 and elapsed < 600
    verdict(8, ok, f"mean_gap {mean_gap:.3f} (<0.15), cov_gap {cov_gap:.3f} (<0.3), "
                   f"train+sample {elapsed:.0f} s (<600)")
    assert ok


# -- 9 ----------------------------------------------------------------------

def _inside_pose(xyz, center, size, yaw, tol=1e-9):
    """Membership through the box's own frame: rotate by -yaw and compare half-sizes."""
    d = xyz - center
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])
    return np.all(np.abs(local) <= np.asarray(size) / 2 + tol, axis=1)


def _pixel_points(view):
    d, yaw, pitch = view.depth, view.yaw_raw, view.pitch_raw
    return np.stack([d * np.cos(yaw) * np.cos(pitch), -d * np.sin(yaw) * np.cos(pitch),
                     d * np.sin(pitch)], axis=-1).reshape(-1, 3)


def test_composite_rule_oracle(verdict):
    mismatched, leaked, total_replaced = 0, 0, 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        center = (rng.uniform(6, 25), rng.uniform(-8, 8))
        yaw = rng.uniform(-np.pi, np.pi)
        cfg = SceneConfig(object_points=int(rng.integers(0, 600)), center=center, yaw=yaw)
        cloud, box, _ = synth_scene(seed, cfg)
        shift = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), 0.0])
        old_c = np.array([*center, box.center[2]])
        inside_old = _inside_pose(cloud.xyz, old_c, cfg.size, yaw)
        pts = cloud.points.copy()
        pts[inside_old, :3] += shift
        new_box = box.translated(shift)
        original, edited = project(cloud), project(PointCloud(pts))

        # rule (i): original pixel holds a point of the old object
        m_points = (original.occupancy.reshape(-1)
                    & _inside_pose(_pixel_points(original), old_c, cfg.size, yaw)).reshape(original.shape)
        result = range_composite(original, edited, new_box, m_points=m_points)

        H, W = original.shape
        new_c = old_c + shift
        expect = np.zeros((H, W), dtype=bool)
        e_pts = _pixel_points(edited).reshape(H, W, 3)
        for r, c in itertools.product(range(H), range(W)):
            rule_i = m_points[r, c]
            rule_ii = edited.occupancy[r, c] and _inside_pose(e_pts[r, c][None], new_c, cfg.size, yaw)[0]
            expect[r, c] = rule_i or rule_ii
        total_replaced += int(expect.sum())
        for name in ("depth", "intensity", "occupancy", "pitch_raw", "yaw_raw"):
            got = getattr(result, name)
            want = np.where(expect, getattr(edited, name), getattr(original, name))
            mismatched += int((got != want).sum())
            leaked += int((got[~expect] != getattr(original, name)[~expect]).sum())

    ok = mismatched == 0 and leaked == 0
    verdict(9, ok, f"50 scenes, {total_replaced} replaced pixels; {mismatched} mismatches "
                   f"vs per-pixel rules, {leaked} out-of-rule pixels modified")
    assert ok


# -- 10 ---------------------------------------------------------------------

def _brute_hull_mask(pts, D, eps=1e-12):
    """Pixel centre in the hull iff it lies in some triangle of three input points."""
    cc, rr = np.meshgrid(np.arange(D) + 0.5, np.arange(D) + 0.5)
    out = np.zeros((D, D), dtype=bool)
    for i, j, k in itertools.combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-12:
            continue
        sgn = np.sign(area)
        s1 = sgn * ((b[0] - a[0]) * (rr - a[1]) - (b[1] - a[1]) * (cc - a[0]))
        s2 = sgn * ((c[0] - b[0]) * (rr - b[1]) - (c[1] - b[1]) * (cc - b[0]))
        s3 = sgn * ((a[0] - c[0]) * (rr - c[1]) - (a[1] - c[1]) * (cc - c[0]))
        out |= (s1 >= -eps) & (s2 >= -eps) & (s3 >= -eps)
    return out


def test_mask_algebra(verdict):
    rng = np.random.default_rng(10)
    cam = CameraModel(np.array([[800.0, 0, 640, 0], [0, 800, 360, 0], [0, 0, 1, 0]]))
    mismatches, complement_ok, checked = 0, True, 0
    while checked < 100:
        center = (rng.uniform(-6, 6), rng.uniform(-2, 2), rng.uniform(8, 40))
        size = rng.uniform(0.5, 5, 3)
        box = Box3D.from_pose(center, size, rng.uniform(-np.pi, np.pi))
        # tilt the box so its image outline is a general hexagon
        R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        box = Box3D((box.corners - box.center) @ R.T + box.center)
        proj = project_box_camera(box, cam)
        if proj.behind.any():
            continue
        D = int(rng.integers(4, 65))
        _, pts = zoom_viewport_camera(proj, (720, 1280), D)
        m = rasterize_mask(pts, D)
        mismatches += int((m.astype(bool) != _brute_hull_mask(pts, D)).sum())
        complement_ok &= np.array_equal(m + mask_complement(m), np.ones((D, D), dtype=m.dtype))
        checked += 1

    ok = mismatches == 0 and complement_ok
    verdict(10, ok, f"100 boxes, {mismatches} pixels differ from brute-force hull; "
                    f"m + complement == J: {complement_ok}")
    assert ok


# -- 11 ---------------------------------------------------------------------

def _median_ref(ref, cand, mask):
    errs = sorted(abs(float(r) - float(c)) for r, c, m in
                  zip(ref.ravel(), cand.ravel(), mask.ravel()) if m)
    return errs[(len(errs) - 1) // 2]


def _mse_ref(ref, cand, mask):
    sq = [(float(r) - float(c)) ** 2 for r, c, m in zip(ref.ravel(), cand.ravel(), mask.ravel()) if m]
    return sum(sq) / len(sq)


def test_metric_self_consistency(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    zero = True
    for _ in range(50):
        shape = tuple(rng.integers(1, 40, 2))
        ref = rng.uniform(0, 54, shape)
        cand = ref + rng.normal(0, rng.uniform(0.01, 3), shape)
        mask = rng.random(shape) < rng.uniform(0.05, 1)
        mask.flat[rng.integers(mask.size)] = True
        p = MaskedPair(ref, cand, mask)
        worst = max(worst, abs(median_depth_error(p) - _median_ref(ref, cand, mask)),
                    abs(intensity_mse(p) - _mse_ref(ref, cand, mask)))
        same = MaskedPair(ref, ref.copy(), mask)
        zero &= median_depth_error(same) == 0.0 and intensity_mse(same) == 0.0

    ok = worst < 1e-9 and zero
    verdict(11, ok, f"max disagreement with reference implementations {worst:.2e} (limit 1e-9); "
                    f"identical inputs give 0: {zero}")
    assert ok
