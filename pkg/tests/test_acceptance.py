"""Acceptance criteria, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line that is echoed in the pytest
terminal summary (see conftest.py). Criteria 7-11 share one run of the bundled
smoke experiment, which takes tens of minutes on a CPU.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from gliomadiff import cli
from gliomadiff import diffusion as dm
from gliomadiff import experiment as ex
from gliomadiff import metrics as M
from gliomadiff import model as gd
from gliomadiff import warpnet as wn
from gliomadiff.sdfprob import mask_to_sdf, sdf_to_prob, threshold_distance
from oracles import boundary_set, central_difference_grad, ece_loop, pearson_two_pass, relative_error

RESULTS = {}

ABLATION_SEEDS = (0, 1, 2)
ABLATION_STEPS = 400


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def sdf_oracle(mask):
    """Brute-force minimum distance to the 4-neighbour boundary set, signed."""
    pts = np.array(boundary_set(mask), dtype=float)
    H, W = mask.shape
    rr, cc = np.mgrid[0:H, 0:W]
    d = np.sqrt((rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2).min(-1)
    return np.where(mask.astype(bool), -d, d)


def test_criterion_01_sdf_oracle():
    rng = np.random.default_rng(101)
    masks = []
    while len(masks) < 50:
        h, w = rng.integers(2, 33, size=2)
        m = rng.uniform(size=(h, w)) < rng.uniform(0.05, 0.8)
        if m.any() and not m.all():
            masks.append(m.astype(np.uint8))
    t0 = time.perf_counter()
    sdfs = [mask_to_sdf(m).phi for m in masks]
    elapsed = time.perf_counter() - t0
    err = max(float(np.abs(s - sdf_oracle(m)).max()) for s, m in zip(sdfs, masks))
    report(1, err <= 1e-6 and elapsed < 10,
           f"SDF vs brute force on 50 masks: max err {err:.2e} mm, {elapsed:.3f} s")


def test_criterion_02_logistic_fixed_points():
    rng = np.random.default_rng(102)
    mid = float(sdf_to_prob(np.array([15.0]), 0.1, 15.0).p[0])
    zero = float(sdf_to_prob(np.array([0.0]), 0.1, 15.0).p[0])
    inv_ok = True
    for _ in range(20):
        phi = rng.uniform(-40, 60, size=(16, 16))
        tau = rng.uniform(0.05, 0.95)
        dist = threshold_distance(tau, 0.1, 15.0)
        p = sdf_to_prob(phi, 0.1, 15.0).p
        # off a 1e-9 band around the threshold distance the two cuts agree exactly
        far = np.abs(phi - dist) > 1e-9
        inv_ok &= bool(np.array_equal((p > tau)[far], (phi < dist)[far]))
    ok = abs(mid - 0.5) <= 1e-12 and abs(zero - 0.817574) <= 1e-5 and inv_ok
    report(2, ok, f"P(15)={mid:.15f}, P(0)={zero:.6f}, threshold inversion exact={inv_ok}")


def test_criterion_03_warp_identity_and_shift():
    rng = np.random.default_rng(103)
    img = rng.normal(size=(1, 1, 24, 20))
    ident = float((wn.warp(torch.as_tensor(img), torch.zeros(1, 2, 24, 20)) - torch.as_tensor(img))
                  .abs().max())
    shift_ok = True
    for dx, dy in ((1, 0), (0, 2), (-3, 1), (2, -2)):
        f = torch.zeros(1, 2, 24, 20, dtype=torch.float64)
        f[:, 0], f[:, 1] = dx, dy
        out = wn.warp(torch.as_tensor(img), f).numpy()[0, 0]
        ref = np.roll(img[0, 0], (-dy, -dx), axis=(0, 1))
        m = 4
        shift_ok &= bool(np.array_equal(out[m:-m, m:-m], ref[m:-m, m:-m]))
    report(3, ident < 1e-6 and shift_ok, f"zero-field max diff {ident:.1e}; integer shifts exact={shift_ok}")


def test_criterion_04_gradient_checks():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(104)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    errs = []
    phi1, phi2 = r(1, 1, 8, 8), r(1, 1, 8, 8)
    v = r(1, 2, 8, 8) * 0.7
    vv = v.clone().requires_grad_()
    (ga,) = torch.autograd.grad(wn.deformation_loss(phi1, phi2, vv), vv)
    errs.append(relative_error(ga, central_difference_grad(lambda x: wn.deformation_loss(phi1, phi2, x), v)))
    P = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
    R = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
    eps, eps_hat, logits = r(1, 1, 8, 8), r(1, 1, 8, 8), r(1, 1, 8, 8)
    lg = logits.clone().requires_grad_()
    (ga,) = torch.autograd.grad(gd.rt_weighted_loss(P, lg, R), lg)
    errs.append(relative_error(ga, central_difference_grad(lambda x: gd.rt_weighted_loss(P, x, R), logits)))
    cfg = gd.GliomaDiffConfig(channels=[8], T=10)
    eh, lg = eps_hat.clone().requires_grad_(), logits.clone().requires_grad_()
    ge, gl = torch.autograd.grad(gd.total_loss(eps, eh, P, lg, R, cfg), (eh, lg))
    errs.append(relative_error(ge, central_difference_grad(
        lambda x: gd.total_loss(eps, x, P, logits, R, cfg), eps_hat)))
    errs.append(relative_error(gl, central_difference_grad(
        lambda x: gd.total_loss(eps, eps_hat, P, x, R, cfg), logits)))
    elapsed = time.perf_counter() - t0
    report(4, max(errs) < 1e-4 and elapsed < 60,
           f"max relative gradient error {max(errs):.2e} over 4 checks, {elapsed:.2f} s")


def test_criterion_05_schedule_invariants():
    s = dm.make_linear_schedule(1000)
    dec = bool(np.all(np.diff(s.alpha_bars) < 0))
    hand = dm.DiffusionSchedule(np.array([0.1, 0.2, 0.3, 0.4]))
    hand_ok = bool(np.allclose(hand.alpha_bars, [0.9, 0.72, 0.504, 0.3024], rtol=0, atol=1e-15))
    rng = np.random.default_rng(105)
    N, t, x0 = 10_000, 500, 0.6
    xt = dm.q_sample(np.full(N, x0), t, rng.standard_normal(N), s)
    ab = s.alpha_bars[t - 1]
    m_ref, v_ref = math.sqrt(ab) * x0, 1 - ab
    se_m = math.sqrt(v_ref / N)
    se_v = v_ref * math.sqrt(2 / (N - 1))
    mc_ok = abs(xt.mean() - m_ref) < 4 * se_m and abs(xt.var(ddof=1) - v_ref) < 4 * se_v
    x0s = torch.rand(4, 1, 8, 8, dtype=torch.float64) * 2 - 1
    e = torch.randn_like(x0s)
    tt = torch.tensor([1, 10, 500, 1000])
    inv = float((dm.predict_x0(dm.q_sample(x0s, tt, e, s), tt, e, s) - x0s).abs().max())
    ok = dec and hand_ok and mc_ok and inv < 1e-5
    report(5, ok, f"abar decreasing={dec}, 4-step hand case={hand_ok}, MC within 4 SE={mc_ok}, "
                  f"eps inversion err {inv:.1e}")


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(106)
    P = rng.uniform(size=(12, 12))
    Q = np.clip(rng.uniform(size=(12, 12)), 1e-7, 1 - 1e-7)
    a, b = rng.uniform(-1, 1, size=(12, 12)), rng.uniform(-1, 1, size=(12, 12))
    n = P.size
    pairs = list(zip(P.ravel(), Q.ravel()))
    loops = {
        "rmse": (M.rmse(P, Q), math.sqrt(sum((p - q) ** 2 for p, q in pairs) / n)),
        "ce": (M.soft_ce(P, Q), sum(-(p * math.log(q) + (1 - p) * math.log(1 - q)) for p, q in pairs) / n),
        "kl": (M.kl_divergence(P, Q), sum(p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
                                          for p, q in pairs) / n),
        "dice": (M.dice(P, Q), 2 * sum(p > .8 and q > .8 for p, q in pairs)
                 / (sum(p > .8 for p in P.ravel()) + sum(q > .8 for q in Q.ravel()))),
        "pearson": (M.pearson_masked(P, Q), pearson_two_pass(*zip(*[(p, q) for p, q in pairs if p > 0.2]))),
        "psnr": (M.psnr(a, b), 10 * math.log10(4 / (sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / n))),
        "ece": (M.ece(P > 0.5, Q).ece, ece_loop(P > 0.5, Q, 10)),
    }
    worst = max(abs(x - y) for x, y in loops.values())
    e_mis = M.ece(np.zeros(1000), np.full(1000, 0.9)).ece
    q = rng.uniform(size=100_000)
    e_cal = M.ece(rng.uniform(size=q.size) < q, q).ece
    floor = M.soft_ce(np.full(4, 0.8), np.full(4, 0.8))
    ok = worst <= 1e-10 and abs(e_mis - 0.9) < 1e-12 and e_cal < 0.02 and abs(floor - 0.5004) <= 1e-4
    report(6, ok, f"{len(loops)} metrics vs loops max diff {worst:.1e}; ECE 0.9 case {e_mis:.3f}, "
                  f"calibrated {e_cal:.4f}; CE floor {floor:.4f}")


# --------------------------------------------------------------------------
# smoke experiment (criteria 7-11)
# --------------------------------------------------------------------------

def _smoke_config(tmp, **over):
    d = ex.ExperimentConfig.load("smoke.json").to_dict()
    d["out_dir"] = str(tmp)
    for k, v in over.items():
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    path = tmp / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    cfg_path = _smoke_config(tmp)
    t0 = time.perf_counter()
    for cmd in ("make-phantoms", "train-deform", "train", "evaluate", "plot"):
        assert cli.main([cmd, "--config", str(cfg_path)]) == 0, cmd
    cfg = ex.ExperimentConfig.load(cfg_path)
    return cfg, cfg_path, time.perf_counter() - t0


def _smoothed_monotone(curve, n_blocks=6):
    blocks = np.array_split(np.asarray(curve), n_blocks)
    means = np.array([b.mean() for b in blocks])
    return bool(np.all(np.diff(means) <= 0)), means


def test_criterion_07_smoke_experiment(smoke):
    cfg, _, elapsed = smoke
    w = ex.read_curve(cfg.out / "warpnet_loss.csv")["loss"]
    w0, w1 = w[:10].mean(), w[-50:].mean()
    mono, means = _smoothed_monotone(ex.read_curve(cfg.out / "gliomadiff_loss.csv")["total"])
    recs = M.records_from_csv((cfg.out / "eval/records.csv").read_text())
    d, r = np.mean([x.dice for x in recs]), np.mean([x.rmse for x in recs])
    ok = w1 < 0.5 * w0 and mono and d >= 0.60 and r <= 0.10 and elapsed < 8 * 3600
    report(7, ok, f"warpnet loss {w0:.4f} -> {w1:.4f}; gliomadiff block means "
                  f"{np.array2string(means, precision=4)}; DSC {d:.3f}, RMSE {r:.4f}, "
                  f"{len(recs)} cases, {elapsed / 60:.1f} min")


def test_criterion_08_binary_vs_probabilistic_ece(smoke, tmp_path_factory):
    base_cfg, _, _ = smoke
    wins, lines = 0, []
    for seed in ABLATION_SEEDS:
        ece = {}
        root = tmp_path_factory.mktemp(f"ablation{seed}")
        shared = {"seed": seed, "train": {"steps": ABLATION_STEPS}}
        if seed == base_cfg.seed:
            shared["dataset"] = str(base_cfg.dataset_dir)
            warp = base_cfg.out / "warpnet.pt"
        else:
            c = ex.ExperimentConfig.load(_smoke_config(root / "data_run", **shared))
            ex.make_phantoms(c)
            ex.train_deform(c)
            shared["dataset"] = str(c.dataset_dir)
            warp = c.out / "warpnet.pt"
        own = {}
        for target in ("prob", "binary"):
            c = ex.ExperimentConfig.load(_smoke_config(root / target, gliomadiff={"target": target}, **shared))
            ex.train_model(c, warp)
            ex.evaluate(c, warpnet_ckpt=warp)
            cal = json.loads((c.out / "eval/calibration.json").read_text())
            ece[target] = cal["ece"]
            own[target] = cal["vs_target"]["ece"]
        win = ece["prob"] < ece["binary"]
        wins += win
        lines.append(f"seed {seed}: prob {ece['prob']:.4f} vs binary {ece['binary']:.4f} "
                     f"(each against its own training target: {own['prob']:.4f} vs {own['binary']:.4f})")
    report(8, wins >= 2, f"ECE(prob) < ECE(binary) on {wins}/3 seeds; " + "; ".join(lines))


def test_criterion_09_temporal_sensitivity(smoke):
    cfg, _, _ = smoke
    model, warp = ex.load_models(cfg)
    cohort, spacing = ex.load_split(cfg, "test")
    pairs = [(ps.studies[0], ps.studies[1]) for ps in cohort]
    area = {}
    for gap in (30, 180):
        preds = gd.predict_batch(model, warp, pairs, [s2.day + gap for _, s2 in pairs],
                                 generator=torch.Generator().manual_seed(cfg.seed), spacing_mm=spacing)
        area[gap] = float(np.mean([(p.p_hat.p > cfg.eval.threshold).sum() for p in preds]))
    # the deformation network must respond to its day-gap input as well
    s1, s2 = pairs[0]
    phi1, phi2 = mask_to_sdf(s1.gtv_mask, spacing), mask_to_sdf(s2.gtv_mask, spacing)
    dv = float(np.abs(wn.predict_field(warp, phi1, phi2, 30).v - wn.predict_field(warp, phi1, phi2, 180).v).max())
    ok = area[180] > area[30] and dv > 1e-4
    report(9, ok, f"mean thresholded area {area[30]:.1f} px at +30 d vs {area[180]:.1f} px at +180 d; "
                  f"warp field change {dv:.3f} px")


def test_criterion_10_clusters_and_plots(smoke):
    cfg, _, _ = smoke
    rows = (cfg.out / "eval/clusters.csv").read_text().splitlines()
    labels = [r.split(",")[0] for r in rows[1:]]
    expected = ["0-60", "61-120", "121-180", "181-280", "281-365", "366+"]
    plots = [cfg.out / "plots" / n for n in ("calibration.png", "interval_boxplots.png", "area_scatter.png")]
    plots_ok = all(p.is_file() and p.stat().st_size > 0 for p in plots)
    rng = np.random.default_rng(110)
    recs = [M.EvalRecord("p", int(d), *rng.uniform(size=8)) for d in rng.integers(0, 1000, size=500)]
    table = M.interval_clusters(recs)
    in_one = all(sum(lo <= r.dl2_days <= hi for _, lo, hi in M.INTERVAL_BINS) == 1 for r in recs)
    ok = labels == expected and plots_ok and in_one and sum(t["count"] for t in table) == len(recs)
    report(10, ok, f"cluster bins {labels}; 3 plots written={plots_ok}; "
                   f"500 random records each in exactly one bin={in_one}")


def test_criterion_11_determinism(smoke, tmp_path_factory):
    cfg, cfg_path, _ = smoke
    first = (cfg.out / "eval/records.csv").read_bytes()
    assert cli.main(["evaluate", "--config", str(cfg_path)]) == 0
    again = (cfg.out / "eval/records.csv").read_bytes()
    # whole pipeline twice from scratch, with shortened training
    short = {"warpnet_optim": {"steps": 20}, "train": {"steps": 20}}
    outs = []
    for k in range(2):
        p = _smoke_config(tmp_path_factory.mktemp(f"repeat{k}"), **short)
        assert cli.main(["run", "--config", str(p)]) == 0
        outs.append((ex.ExperimentConfig.load(p).out / "eval/records.csv").read_bytes())
    ok = first == again and outs[0] == outs[1]
    report(11, ok, f"re-evaluation byte-identical={first == again}; "
                   f"repeated pipeline byte-identical={outs[0] == outs[1]}")
