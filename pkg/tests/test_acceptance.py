"""Exit criteria, one test per criterion.  Each test records a PASS/FAIL line
that pytest prints in its terminal summary."""

import json
import time

import numpy as np
import pytest

from dipreg.baseline import smoothness_penalty
from dipreg.cli import main
from dipreg.core import (AdamState, Rng, Tensor, adam_step, backward, concat_channels, conv2d,
                         instance_norm, leaky_relu, upsample_bilinear2x)
from dipreg.engine import ImagePair, mae_loss
from dipreg.fileio import load_field, load_image, save_field, save_image
from dipreg.generator import GeneratorConfig, GeneratorNet, init_params, sample_input
from dipreg.metrics import ssim
from dipreg.runner import MethodSpec, run_suite, synth_suite
from dipreg.synth import SynthSpec
from dipreg.warp import deformation, identity_grid, jacobian_det, warp

from conftest import check_gradients, record_criterion
from test_metrics import brute_force_ssim

SUITE_PAIRS = 10
SUITE_SPEC = SynthSpec(size=(128, 128), max_displacement=8.0, seed=0)
RUNTIME_LIMIT = 30 * 60


def _weighted(t, w):
    return (t * Tensor(w)).sum()


def _generator_directional_error(seed):
    """Directional finite difference of a weighted output sum along a random
    unit direction in parameter space, at step 1e-5."""
    r = np.random.default_rng(seed)
    cfg = GeneratorConfig(levels=1, channels_down=[4], channels_up=[4], channels_skip=[4],
                          input_channels=4)
    net = init_params(cfg, Rng(seed))
    z = sample_input(Rng(seed + 1), 4, 8, 8)
    wts = r.normal(size=(2, 8, 8))
    backward(_weighted(net.forward(z), wts))
    direction = [r.normal(size=p.shape) for p in net.params]
    norm = np.sqrt(sum((d ** 2).sum() for d in direction))
    direction = [d / norm for d in direction]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(net.params, direction))

    def value(eps):
        trial = GeneratorNet(cfg, {n: Tensor(p.data + eps * d)
                                   for (n, p), d in zip(net.named_params.items(), direction)})
        return _weighted(trial.forward(z), wts).item()

    numeric = (value(1e-5) - value(-1e-5)) / 2e-5
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _instances(seed):
    r = np.random.default_rng(seed)
    nudge = lambda x: np.where(np.abs(x) < 1e-2, x + 2e-2, x)
    kinkfree = lambda u: np.where(np.abs(u - np.round(u)) < 0.05, u + 0.1, u)
    base = identity_grid(4, 5)
    stride = 1 + seed % 2
    w = {k: r.normal(size=shape) for k, shape in {
        "conv": (2, 3, 3) if stride == 2 else (2, 5, 5), "up": (2, 4, 6), "norm": (2, 3, 3),
        "relu": (2, 3, 3), "cat": (3, 2, 2), "warp": (1, 4, 5)}.items()}
    return {
        "conv2d": (lambda x, k, b: _weighted(conv2d(x, k, b, stride=stride, padding=1), w["conv"]),
                   [r.normal(size=(3, 5, 5)), r.normal(size=(2, 3, 3, 3)), r.normal(size=2)]),
        "upsample_bilinear2x": (lambda x: _weighted(upsample_bilinear2x(x), w["up"]),
                                [r.normal(size=(2, 2, 3))]),
        "instance_norm": (lambda x: _weighted(instance_norm(x), w["norm"]),
                          [r.normal(size=(2, 3, 3))]),
        "leaky_relu": (lambda x: _weighted(leaky_relu(x), w["relu"]),
                       [nudge(r.normal(size=(2, 3, 3)))]),
        "concat_channels": (lambda a, b: _weighted(concat_channels(a, b), w["cat"]),
                            [r.normal(size=(1, 2, 2)), r.normal(size=(2, 2, 2))]),
        "mae_loss": (mae_loss, [r.normal(size=(1, 3, 3)), r.normal(size=(1, 3, 3))]),
        "warp": (lambda img, u: _weighted(warp(img, base + u), w["warp"]),
                 [r.uniform(size=(1, 4, 5)), kinkfree(r.uniform(-1.5, 1.5, size=(2, 4, 5)))]),
        "smoothness_penalty": (smoothness_penalty, [r.normal(size=(2, 4, 4))]),
    }


def test_criterion_1_autodiff_correctness():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        for name, (build, arrays) in _instances(seed).items():
            worst[name] = max(worst.get(name, 0.0), check_gradients(build, arrays))
        worst["generator"] = max(worst.get("generator", 0.0), _generator_directional_error(seed))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    record_criterion(1, "autodiff vs finite differences", ok,
                     f"20 instances per op, worst rel err {max(worst.values()):.2e} "
                     f"({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert ok, worst


def test_criterion_2_warp_jacobian_identities():
    r = np.random.default_rng(0)
    img = r.uniform(size=(1, 31, 27))
    warp_ok = np.array_equal(warp(Tensor(img), identity_grid(31, 27)).data, img)
    ident_err = np.abs(jacobian_det(identity_grid(31, 27)) - 1).max()
    u = np.zeros((2, 20, 20))
    u[0], u[1] = 3.0, -2.0
    trans_err = np.abs(jacobian_det(deformation(Tensor(u))) - 1).max()
    scale_err = np.abs(jacobian_det(1.1 * identity_grid(20, 20).data)[1:-1, 1:-1] - 1.21).max()
    ok = warp_ok and ident_err <= 1e-12 and trans_err <= 1e-12 and scale_err <= 1e-10
    record_criterion(2, "warp/Jacobian identities", ok,
                     f"identity warp bitwise={warp_ok}, |detJ-1| identity {ident_err:.1e}, "
                     f"translation {trans_err:.1e}, scaling err {scale_err:.1e}")
    assert ok


def test_criterion_3_ssim_oracle():
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        a, b = r.uniform(size=(16, 16)), r.uniform(size=(16, 16))
        worst = max(worst, abs(ssim(a, b) - brute_force_ssim(a, b)))
    self_one = ssim(a, a) == 1.0
    c1 = 0.01 ** 2
    closed = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
    const_err = abs(ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.8)) - closed)
    ok = worst < 1e-6 and self_one and const_err < 1e-12
    record_criterion(3, "SSIM oracle equivalence", ok,
                     f"50 pairs max diff {worst:.1e}, ssim(a,a)==1 {self_one}, "
                     f"constant-image err {const_err:.1e}")
    assert ok


def test_criterion_4_adam_first_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step([p], AdamState.for_params([p], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8))
    err = abs(p.data[0] - (-0.001 / (1.0 + 1e-8)))
    record_criterion(4, "Adam first step", err < 1e-12, f"|theta - expected| = {err:.1e}")
    assert err < 1e-12


def test_criterion_5_near_identity_initialization():
    values = []
    for seed in range(20):
        rng = Rng(seed)
        net = init_params(GeneratorConfig(), rng)
        u = net.forward(sample_input(rng, 16, 128, 128)).data
        values.append(float(np.percentile(np.hypot(u[0], u[1]), 95)))
    ok = max(values) < 0.5
    record_criterion(5, "near-identity initialization", ok,
                     f"95th percentile |u| over 20 seeds: max {max(values):.4f} px")
    assert ok


@pytest.fixture(scope="module")
def suite():
    """The default synthetic suite under DIP and both baseline settings."""
    items = synth_suite(SUITE_PAIRS, SUITE_SPEC)
    out = {}
    for token in ("dip", "baseline", "baseline@0"):
        start = time.perf_counter()
        rows = run_suite(items, [MethodSpec.parse(token)], {})
        out[token] = (rows, time.perf_counter() - start)
    return out


def _metric(rows, name):
    return np.array([getattr(r.metrics, name) for r in rows])


def test_criterion_6_synthetic_recovery(suite):
    rows, elapsed = suite["dip"]
    assert all(r.status == "ok" for r in rows), [r.error for r in rows]
    mean_ssim = _metric(rows, "ssim").mean()
    detj = _metric(rows, "mean_detJ")
    neg = _metric(rows, "neg_frac")
    unreg = np.array([r.unregistered_ssim for r in rows])
    ok = (mean_ssim >= 0.90 and 0.9 <= detj.mean() <= 1.1 and np.all((detj >= 0.9) & (detj <= 1.1))
          and neg.max() <= 0.01 and elapsed <= RUNTIME_LIMIT)
    record_criterion(6, "synthetic recovery", ok,
                     f"mean SSIM {mean_ssim:.4f} (unregistered {unreg.mean():.4f}), "
                     f"mean detJ {detj.mean():.4f} [{detj.min():.4f}, {detj.max():.4f}], "
                     f"max neg_frac {neg.max():.4%}, DIP runtime {elapsed / 60:.1f} min")
    assert ok


def test_criterion_7_regularity_trend(suite):
    dip = np.median(_metric(suite["dip"][0], "std_detJ"))
    reg = _metric(suite["baseline"][0], "std_detJ")
    free = _metric(suite["baseline@0"][0], "std_detJ")
    ok = dip <= 2 * np.median(reg) and np.median(free) > np.median(reg)
    record_criterion(7, "regularity trend", ok,
                     f"median std detJ: dip {dip:.4f}, baseline(0.1) {np.median(reg):.4f}, "
                     f"baseline(0) {np.median(free):.4f}")
    assert ok


def test_criterion_8_method_comparison(suite):
    dip = _metric(suite["dip"][0], "ssim").mean()
    base = _metric(suite["baseline"][0], "ssim").mean()
    ok = dip >= base - 0.02
    record_criterion(8, "method comparison direction", ok,
                     f"mean SSIM dip {dip:.4f} vs baseline {base:.4f}")
    assert ok


TINY = ("iterations = 10\nlog_every = 5\nlevels = 2\nchannels_down = 4,4\nchannels_up = 4,4\n"
        "channels_skip = 2,2\ninput_channels = 4\nbaseline.iterations = 10\n")


def test_criterion_9_determinism_and_formats(tmp_path):
    from dipreg.synth import synth_pair

    pair, gt = synth_pair(SynthSpec(size=(32, 32), grid_spacing=16, max_displacement=3, seed=1))
    save_image(tmp_path / "in.pgm", pair.moving)
    save_image(tmp_path / "tg.pgm", pair.fixed)
    (tmp_path / "tiny.cfg").write_text(TINY)
    common = ["register", "--input", str(tmp_path / "in.pgm"), "--target",
              str(tmp_path / "tg.pgm"), "--config", str(tmp_path / "tiny.cfg"), "--seed", "4"]
    codes = [main(common + ["--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    same_json = (tmp_path / "a" / "metrics.json").read_bytes() == \
        (tmp_path / "b" / "metrics.json").read_bytes()

    save_field(tmp_path / "gt.dipf", gt)
    field_ok = np.array_equal(load_field(tmp_path / "gt.dipf"),
                              gt.astype(np.float32).astype(np.float64))
    pgm = tmp_path / "in.pgm"
    save_image(tmp_path / "copy.pgm", load_image(pgm))
    pgm_ok = (tmp_path / "copy.pgm").read_bytes() == pgm.read_bytes()

    (tmp_path / "suite.txt").write_text("pairs = 3\nsize = 32\ngrid_spacing = 16\n"
                                        "max_displacement = 3\n")
    report = tmp_path / "report.json"
    bench_code = main(["bench", "--suite", str(tmp_path / "suite.txt"), "--methods",
                       "dip,baseline", "--config", str(tmp_path / "tiny.cfg"), "--out", str(report)])
    rows = [line.split(",")[:2] for line in report.with_suffix(".csv").read_text().splitlines()[1:]]
    one_row_each = sorted(map(tuple, rows)) == sorted(
        (f"synth{i:03d}", m) for i in range(3) for m in ("dip", "baseline"))
    ok = codes == [0, 0] and same_json and field_ok and pgm_ok and bench_code == 0 and one_row_each
    record_criterion(9, "determinism and formats", ok,
                     f"metrics JSON identical {same_json}, field round-trip {field_ok}, "
                     f"PGM round-trip {pgm_ok}, one bench row per (pair, method) {one_row_each}")
    assert ok
    assert json.loads(report.read_text())["rows"] == 6
