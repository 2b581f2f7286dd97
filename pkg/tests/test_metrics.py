import json
import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gliomadiff import metrics as M
from oracles import ece_loop, pearson_two_pass

EPS = 1e-7


def loop_mean(fn, a, b):
    vals = [fn(x, y) for x, y in zip(np.ravel(a), np.ravel(b))]
    return sum(vals) / len(vals)


def clamp(q):
    return min(max(q, EPS), 1 - EPS)


@pytest.fixture
def pair(rng):
    return rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))


def test_pixelwise_metrics_match_loops(pair):
    a, b = pair
    assert abs(M.rmse(a, b) - math.sqrt(loop_mean(lambda x, y: (x - y) ** 2, a, b))) < 1e-10
    ce = loop_mean(lambda P, q: -(P * math.log(clamp(q)) + (1 - P) * math.log(1 - clamp(q))), a, b)
    assert abs(M.soft_ce(a, b) - ce) < 1e-10

    def kl(P, q):
        q = clamp(q)
        t1 = P * math.log(P / q) if P > 0 else 0.0
        t0 = (1 - P) * math.log((1 - P) / (1 - q)) if P < 1 else 0.0
        return t1 + t0

    assert abs(M.kl_divergence(a, b) - loop_mean(kl, a, b)) < 1e-10
    A = [x > 0.8 for x in np.ravel(a)]
    B = [y > 0.8 for y in np.ravel(b)]
    inter = sum(x and y for x, y in zip(A, B))
    assert abs(M.dice(a, b) - 2 * inter / (sum(A) + sum(B))) < 1e-10
    mse = loop_mean(lambda x, y: (x - y) ** 2, a, b)
    assert abs(M.psnr(a, b) - 10 * math.log10(4 / mse)) < 1e-10


def test_rmse_examples(rng):
    a = rng.uniform(size=(8, 8))
    assert M.rmse(a, a) == 0
    assert M.rmse(a, a + 0.1) == pytest.approx(0.1, abs=1e-12)
    x, y, z = (rng.uniform(size=(16, 16)) for _ in range(3))
    assert M.rmse(x, z) <= M.rmse(x, y) + M.rmse(y, z) + 1e-15


def test_soft_ce_examples():
    hard = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert M.soft_ce(hard, hard) < 1e-6
    assert M.soft_ce(np.full((4, 4), 0.5), np.full((4, 4), 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    floor = 0.8 * math.log(1 / 0.8) + 0.2 * math.log(1 / 0.2)
    assert M.soft_ce(np.full((4, 4), 0.8), np.full((4, 4), 0.8)) == pytest.approx(floor, abs=1e-12)
    assert floor == pytest.approx(0.5004, abs=1e-4)


def test_kl_examples(rng):
    a = rng.uniform(size=(8, 8))
    assert M.kl_divergence(a, a) == pytest.approx(0, abs=1e-15)
    assert M.kl_divergence(np.ones((2, 2)), np.full((2, 2), 1 - 1e-7)) == pytest.approx(1e-7, rel=1e-3)
    val = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert M.kl_divergence(np.full((3, 3), 0.8), np.full((3, 3), 0.5)) == pytest.approx(val, abs=1e-12)
    assert val == pytest.approx(0.1927, abs=1e-4)
    b = rng.uniform(size=(8, 8))
    assert M.kl_divergence(a, b) > 0


def test_ece_examples(rng):
    rep = M.ece(np.zeros(100), np.full(100, 0.9))
    assert rep.ece == pytest.approx(0.9, abs=1e-12)
    labels = np.array([1, 0] * 50)
    assert M.ece(labels, np.full(100, 0.5)).ece == pytest.approx(0.0, abs=1e-15)
    q = rng.uniform(size=100_000)
    y = rng.uniform(size=q.size) < q
    cal = M.ece(y, q)
    assert cal.ece < 0.02
    assert 0 <= cal.ece <= 1
    assert cal.bin_counts.sum() == q.size
    assert len(cal.bin_edges) == 11


def test_ece_matches_loop(rng):
    y = rng.integers(0, 2, size=(16, 16))
    q = rng.uniform(size=(16, 16))
    for n_bins in (2, 10, 15):
        assert abs(M.ece(y, q, n_bins).ece - ece_loop(y, q, n_bins)) < 1e-10
    with pytest.raises(ValueError):
        M.ece(y, q, 1)


def test_ece_report_json_round_trip(rng):
    rep = M.ece(rng.integers(0, 2, 50), rng.uniform(0, 0.3, 50))
    back = M.CalibrationReport.from_dict(json.loads(M.report_to_json(rep)))
    assert back.ece == rep.ece
    np.testing.assert_array_equal(back.bin_counts, rep.bin_counts)


def test_dice_examples():
    a = np.zeros(400)
    b = np.zeros(400)
    a[:100] = 1
    b[50:150] = 1
    assert M.dice(a, b) == pytest.approx(0.5)
    assert M.dice(a, a) == 1.0
    c = np.zeros(400)
    c[300:] = 1
    assert M.dice(a, c) == 0.0
    assert M.dice(np.zeros(5), np.zeros(5)) == 1.0
    assert M.dice(a, b) == M.dice(b, a)


def test_psnr_ssim_examples(rng):
    img = rng.uniform(-1, 1, size=(32, 32))
    assert M.psnr(img, img) == 100.0
    assert M.ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    noisy = img + 0.2 * np.where(rng.uniform(size=img.shape) < 0.5, -1, 1)
    assert M.psnr(img, noisy) == pytest.approx(20.0, abs=1e-9)


def test_ssim_against_skimage(rng):
    for _ in range(5):
        a = rng.uniform(-1, 1, size=(40, 48))
        b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
        ref = structural_similarity(a, b, data_range=2.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert abs(M.ssim(a, b) - ref) < 1e-4


def test_ssim_luminance_shift():
    a = np.full((20, 20), -0.5)
    b = a + 1.0
    c1 = (0.01 * 2) ** 2
    expected = (2 * -0.5 * 0.5 + c1) / (0.25 + 0.25 + c1)
    assert M.ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_pearson(rng):
    p = rng.uniform(size=(16, 16))
    assert M.pearson_masked(p, p) == pytest.approx(1.0)
    assert M.pearson_masked(p, 3 * p + 2) == pytest.approx(1.0)
    q = rng.uniform(size=(16, 16))
    sup = p > 0.2
    assert abs(M.pearson_masked(p, q) - pearson_two_pass(p[sup], q[sup])) < 1e-10
    with pytest.raises(M.DegenerateSupport):
        M.pearson_masked(np.zeros((4, 4)), q[:4, :4])
    flat = np.full((4, 4), 0.5)
    with pytest.raises(M.DegenerateSupport):
        M.pearson_masked(flat, q[:4, :4])


def test_area_agreement():
    t = np.zeros((100, 100))
    t.flat[:1000] = 1
    p = np.zeros((100, 100))
    p.flat[:1300] = 1
    out = M.area_agreement([(t, t), (t, p)], spacing_mm=1.0)
    assert out["rows"][0]["deviation_cm2"] == 0
    assert out["rows"][1]["deviation_cm2"] == pytest.approx(3.0)
    assert out["mean_abs_deviation_cm2"] == pytest.approx(1.5)
    big = np.zeros((100, 100))
    big.flat[:1000 + 3100] = 1
    assert M.area_agreement([(t, big)])["rows"][0]["outlier"]
    assert not out["rows"][1]["outlier"]


@pytest.mark.parametrize("dl2,label", [(0, "0-60"), (60, "0-60"), (61, "61-120"), (120, "61-120"),
                                       (180, "121-180"), (181, "181-280"), (280, "181-280"),
                                       (365, "281-365"), (366, "366+"), (5000, "366+")])
def test_interval_labels(dl2, label):
    assert M.interval_label(dl2) == label


def _record(dl2, rmse=0.1, dice=0.7, pid="P"):
    return M.EvalRecord(pid, dl2, rmse, 0.1, 0.1, dice, 0.9, 0.01, 20.0, 0.8)


def test_interval_clusters_partition(rng):
    recs = [_record(int(d), float(r), float(s)) for d, r, s in
            zip(rng.integers(0, 800, 300), rng.uniform(size=300), rng.uniform(size=300))]
    table = M.interval_clusters(recs)
    assert [row["interval"] for row in table] == [b[0] for b in M.INTERVAL_BINS]
    assert sum(row["count"] for row in table) == len(recs)
    for r in recs:
        assert sum(lo <= r.dl2_days <= hi for _, lo, hi in M.INTERVAL_BINS) == 1
    empty = M.interval_clusters([_record(10)])
    assert empty[1]["count"] == 0 and "rmse_mean" not in empty[1]
    with pytest.raises(ValueError):
        M.interval_clusters([])


def test_csv_round_trip():
    recs = [_record(30, 0.123456789012), _record(400, pid="X")]
    text = M.records_to_csv(recs)
    assert text.splitlines()[0] == ",".join(M.CSV_FIELDS)
    back = M.records_from_csv(text)
    assert [r.patient_id for r in back] == ["P", "X"]
    assert back[0].rmse == pytest.approx(0.123456789012, rel=1e-9)
    assert M.clusters_to_csv(M.interval_clusters(recs)).startswith("interval,count")


def test_lpips_hook(rng):
    p = rng.uniform(size=(16, 16))
    img = rng.uniform(-1, 1, size=(16, 16))
    rec = M.evaluate_prediction("P", 30, p, p, img, img, lpips_fn=lambda a, b: 0.25)
    assert rec.extras["lpips"] == 0.25
    assert rec.dice == 1.0 and rec.psnr == 100.0
    assert "extras" not in M.records_to_csv([rec])
