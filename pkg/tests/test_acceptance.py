"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train the toy pipeline and take several minutes each.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from nightstereo.cli import run as cli_run
from nightstereo.config import RunConfig
from nightstereo.diffmath import Tape, Tensor, backward, check_all, no_tape
from nightstereo.losses import LossConfig, distance_regularizer, photometric_loss, total_loss
from nightstereo.matcher import (ConvexUpsampler, DisparityField, coarse_disparity, convex_upsample,
                                 correlation_volume, disparity_mask, neighborhood_index, nn_feature_distance,
                                 propagate_disparity)
from nightstereo.metrics import METRICS, ROOTED, aggregate_unweighted, aggregate_weighted, per_pixel_metrics, \
    GroundTruthDepth, PixelTerms
from nightstereo.model import StereoModel
from nightstereo.synth import gen_scene, random_scene_spec, scene_set
from nightstereo.training import item_loss, loss_config, predict, train


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return emit


# ------------------------------------------------------------------ helpers

def brute_nn(f):
    D = f.shape[0]
    x = f.reshape(D, -1).T
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    dist = np.empty(len(unit))
    idx = np.empty(len(unit), dtype=int)
    for i in range(len(unit)):
        best, best_j = -np.inf, -1
        for j in range(len(unit)):
            if j != i and unit[i] @ unit[j] > best:
                best, best_j = unit[i] @ unit[j], j
        dist[i] = np.linalg.norm(unit[i] - unit[best_j])
        idx[i] = best_j
    return dist.reshape(f.shape[1:]), idx


def planted_features(h, w, d, scale=60.0):
    """One-hot column codes with left(x) == right(x + d); right columns below d get unmatched codes."""
    C = w + d
    left = np.zeros((C, h, w))
    right = np.zeros((C, h, w))
    for x in range(w):
        left[x, :, x] = scale
        right[x - d if x >= d else w + x, :, x] = scale
    return left, right


def oracle_terms(p, g):
    """Per-pixel Eigen terms written out independently of the library."""
    ratio = np.maximum(p / g, g / p)
    return {"abs_rel": np.abs(p - g) / g, "sq_rel": (p - g) ** 2 / g, "rmse": (p - g) ** 2,
            "log_rmse": (np.log(p) - np.log(g)) ** 2, "a1": 1.0 * (ratio < 1.25),
            "a2": 1.0 * (ratio < 1.5625), "a3": 1.0 * (ratio < 1.953125)}


def oracle_binned(values, g, bins, max_depth):
    width = max_depth / bins
    means = []
    for i in range(bins):
        members = values[(g > i * width) & (g <= (i + 1) * width)]
        if members.size:
            means.append(math.fsum(members) / members.size)
    return math.fsum(means) / len(means)


def textured_epe(model, items):
    errs = []
    for it in items:
        d = predict(model, it).match.disparity.values.data
        keep = it.valid & it.textured
        errs.append(np.abs(d - it.disparity)[keep])
    return np.concatenate(errs)


def textured_feature_distance(model, items):
    vals = []
    for it in items:
        fwd = predict(model, it)
        p = nn_feature_distance(fwd.first.coarse).distance.data
        vals.append(p[it.textured[::8, ::8]])
    return float(np.concatenate(vals).mean())


DESK = dict(height=64, width=96, disparity_range=(2.0, 8.0), foreground=1)


# ------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_integrity(report):
    t0 = time.perf_counter()
    results = check_all(seed=0)
    op_worst = max(r.max_rel_error for r in results)
    ops_ok = all(r.error is None and r.max_rel_error < 1e-4 for r in results)

    cfg = RunConfig(height=16, width=16, dim=8, hidden=4, seed=0)
    model = StereoModel.create(cfg)
    rng = np.random.default_rng(1)
    # the residual output projections start at zero, which would leave q/k/v gradients identically zero
    for name, p in model.parameters().items():
        if name.endswith(".o"):
            p.data[...] = 0.3 * rng.normal(size=p.shape)
    item = gen_scene(random_scene_spec(3, 16, 16, disparity_range=(1.0, 3.0), foreground=0, dot_blur=1.5))
    lcfg = loss_config(cfg)
    params = model.parameters()
    with Tape() as tape:
        loss = item_loss(model, item, lcfg).total
    grads = backward(loss, tape)

    def value():
        with no_tape():
            return float(item_loss(model, item, lcfg).total.data)

    groups = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(name)
    pipe_worst, h = 0.0, 1e-6
    for names in groups.values():
        analytic, numeric = [], []
        for name in names:
            flat = params[name].data.reshape(-1)
            for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = value()
                flat[i] = orig - h
                down = value()
                flat[i] = orig
                analytic.append(grads[params[name]].reshape(-1)[i])
                numeric.append((up - down) / (2 * h))
        a, n = np.array(analytic), np.array(numeric)
        pipe_worst = max(pipe_worst, float(np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max())))
    elapsed = time.perf_counter() - t0
    ok = ops_ok and pipe_worst < 1e-3 and elapsed < 120
    assert report(1, ok, f"{len(results)} ops, worst op rel err {op_worst:.2e}; pipeline rel err "
                         f"{pipe_worst:.2e} over {len(groups)} parameter groups; {elapsed:.1f} s")


# ------------------------------------------------------------- criterion 2

def test_criterion_2_matching_oracle(report):
    worst_d = 0.0
    for h, w in [(1, 4), (2, 8), (4, 16), (8, 32), (16, 64)]:
        for d in sorted({0, 1, w // 8, w // 4}):
            left, right = planted_features(h, w, d)
            dc, _ = coarse_disparity(correlation_volume(Tensor(left), Tensor(right)))
            worst_d = max(worst_d, float(np.abs(dc.values.data[:, :w - d] - d).max()))

    worst_p, same_idx = 0.0, True
    rng = np.random.default_rng(0)
    for shape in [(4, 2, 2), (8, 3, 3), (16, 8, 8), (6, 16, 16), (32, 16, 16)]:
        f = rng.normal(size=shape)
        nn = nn_feature_distance(Tensor(f))
        ref, idx = brute_nn(f)
        worst_p = max(worst_p, float(np.abs(nn.distance.data - ref).max()))
        same_idx &= bool(np.array_equal(nn.neighbor, idx))
    ok = worst_d <= 1e-9 and worst_p <= 1e-12 and same_idx
    assert report(2, ok, f"planted disparity max err {worst_d:.1e} px up to 16x64; nn distance max err "
                         f"{worst_p:.1e} up to 16x16, neighbour indices identical: {same_idx}")


# ------------------------------------------------------------- criterion 3

def test_criterion_3_mask_semantics(report):
    m = disparity_mask(np.array([0.1, 0.2, 0.3]), 0.2).mask
    hand = m.tolist() == [False, False, True]
    rng = np.random.default_rng(3)
    monotone = True
    zetas = np.linspace(0.0, 2.0, 41)
    for _ in range(100):
        p = rng.uniform(0.0, 2.0, size=tuple(rng.integers(1, 12, size=2)))
        masks = [disparity_mask(p, z).mask for z in zetas]
        monotone &= all(not np.any(b & ~a) for a, b in zip(masks, masks[1:]))
    assert report(3, hand and monotone, f"M(0.1, 0.2, 0.3) = {m.astype(int).tolist()}; monotone over 100 maps: "
                                        f"{monotone}")


# ------------------------------------------------------------- criterion 4

def test_criterion_4_convexity(report):
    rng = np.random.default_rng(4)
    prop_violation = up_violation = 0.0
    for _ in range(100):
        D, h, w = (int(v) for v in rng.integers(1, 9, size=3))
        h, w = max(h, 1), max(w, 2)
        f = rng.normal(size=(D, h, w)) * rng.uniform(0.01, 20.0)
        d = rng.uniform(0, 10, size=(h, w)) * (rng.uniform(size=(h, w)) > 0.4)
        out = propagate_disparity(Tensor(f), DisparityField(Tensor(d), 1 / 8, "masked")).values.data
        prop_violation = max(prop_violation, float(max(d.min() - out.min(), out.max() - d.max(), 0.0)))

        D = int(rng.integers(1, 6))
        up = ConvexUpsampler(D, hidden=int(rng.integers(2, 9)), rng=rng)
        for p in up.params.values():
            p.data[...] = rng.normal(size=p.shape) * rng.uniform(0.1, 5.0)
        dr = rng.uniform(0, 6, size=(h, w))
        full = convex_upsample(DisparityField(Tensor(dr), 1 / 4, "refined"),
                               Tensor(rng.normal(size=(D, h, w))), up).values.data
        nb = (4.0 * dr).reshape(-1)[neighborhood_index(h, w)]
        lo = np.kron(nb.min(0), np.ones((4, 4)))
        hi = np.kron(nb.max(0), np.ones((4, 4)))
        up_violation = max(up_violation, float(max((lo - full).max(), (full - hi).max(), 0.0)))
    ok = prop_violation <= 1e-9 and up_violation <= 1e-9
    assert report(4, ok, f"100 instances each; worst propagation overshoot {prop_violation:.1e}, "
                         f"worst upsampling overshoot {up_violation:.1e}")


# ------------------------------------------------------------- criterion 5

def test_criterion_5_synthetic_convergence(report, tmp_path):
    t0 = time.perf_counter()
    items = scene_set(32, seed=1, **DESK)
    held = scene_set(4, seed=999, **DESK)
    cfg = RunConfig(batch=2, steps=500, lr=1e-3, seed=0, height=64, width=96)
    result = train(cfg, items, out=tmp_path)
    epe = textured_epe(result.model, held)
    frac = float((epe < 0.75).mean())
    elapsed = time.perf_counter() - t0
    ok = frac >= 0.85 and elapsed < 15 * 60
    assert report(5, ok, f"{frac:.1%} of {epe.size} held-out textured valid pixels under 0.75 px "
                         f"(mean EPE {epe.mean():.3f} px) after {result.state.step} steps; {elapsed:.0f} s")


# ------------------------------------------------------------- criterion 6

def test_criterion_6_regularizer_direction(report):
    sky = dict(DESK, sky=True)
    items = scene_set(32, seed=1, **sky)
    held = scene_set(4, seed=999, **sky)
    stats = {}
    for beta1 in (1.0, 0.0):
        cfg = RunConfig(batch=2, steps=500, lr=1e-3, seed=0, beta1=beta1)
        model = train(cfg, items).model
        stats[beta1] = (textured_feature_distance(model, held), float(textured_epe(model, held).mean()))
    (p_on, e_on), (p_off, e_off) = stats[1.0], stats[0.0]
    ok = p_on > p_off and e_on < e_off
    assert report(6, ok, f"textured nn distance {p_on:.4f} (beta1=1) vs {p_off:.4f} (beta1=0); "
                         f"textured EPE {e_on:.3f} vs {e_off:.3f} px")


# ------------------------------------------------------------- criterion 7

def test_criterion_7_binned_aggregation(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        bins = int(rng.integers(1, 13))
        g = rng.uniform(1e-3, 50.0, size=n) ** rng.uniform(0.6, 1.0)
        p = g * np.exp(rng.normal(scale=0.3, size=n))
        terms = per_pixel_metrics(p[None, :], GroundTruthDepth(g[None, :]), max_depth=50.0)
        ref = oracle_terms(p, g)
        unweighted = aggregate_unweighted(terms)
        weighted, bin_means, _ = aggregate_weighted(terms, bins, 50.0)
        for m in METRICS:
            filled = ~np.isnan(bin_means[m])
            pre_w = float(bin_means[m][filled].mean())
            pre_u = unweighted[m] ** 2 if m in ROOTED else unweighted[m]
            worst = max(worst, abs(pre_w - oracle_binned(ref[m], g, bins, 50.0)),
                        abs(pre_u - math.fsum(ref[m]) / n) / max(1.0, abs(pre_u)))
            final_w = weighted[m] ** 2 if m in ROOTED else weighted[m]
            worst = max(worst, abs(final_w - pre_w) / max(1.0, abs(pre_w)))

    gt = np.array([2.0] * 90 + [22.0] * 10)
    t = PixelTerms({m: np.array([0.1] * 90 + [0.5] * 10) for m in METRICS}, gt)
    u, w = aggregate_unweighted(t)["abs_rel"], aggregate_weighted(t, 10, 50.0)[0]["abs_rel"]
    hand = abs(u - 0.14) < 1e-15 and abs(w - 0.30) < 1e-15

    g = np.repeat(np.arange(10) * 5.0 + 2.5, 13)
    t = PixelTerms({m: rng.uniform(size=g.size) for m in METRICS}, g)
    eq_u, eq_w = aggregate_unweighted(t), aggregate_weighted(t, 10, 50.0)[0]
    equal = all(abs(eq_u[m] - eq_w[m]) <= 1e-12 for m in METRICS)
    ok = worst <= 1e-12 and hand and equal
    assert report(7, ok, f"1000 random instances, worst deviation {worst:.1e}; hand case U={u:.2f} W={w:.2f}; "
                         f"equal counts give U = W: {equal}")


# ------------------------------------------------------------- criterion 8

def test_criterion_8_loss_identities(report):
    img = np.random.default_rng(8).uniform(size=(3, 16, 24))
    photo = float(photometric_loss(img, img, np.zeros((16, 24))).data)
    reg_one = float(distance_regularizer(np.ones((5, 5))).data)
    reg_half = float(distance_regularizer(np.full((5, 5), 0.5), LossConfig(gamma=2.0)).data)
    total = float(total_loss(0.3, 0.2, 0.5, LossConfig(beta1=1.0, beta2=0.1)).data)
    ok = (photo < 1e-6 and reg_one == 0.0 and abs(reg_half - 0.25 * math.log(2.0)) <= 1e-12
          and total == 0.3 + 1.0 * 0.2 + 0.1 * 0.5)
    assert report(8, ok, f"photo(I, I, 0) = {photo:.1e}; reg(1) = {reg_one}; reg(0.5) - ln2/4 = "
                         f"{reg_half - 0.25 * math.log(2.0):.1e}; total = {total!r}")


# ------------------------------------------------------------- criterion 9

def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_reproducibility(report, tmp_path, capsys):
    (tmp_path / "plan.txt").write_text("height=32\nwidth=32\ncount=3\nseed=4\nsky=1\n")
    (tmp_path / "run.txt").write_text("height=32\nwidth=32\ndim=8\nhidden=4\nsteps=3\nlr=0.001\nseed=5\n")
    data, train_out = tmp_path / "data", tmp_path / "train"
    common = ["--config", str(tmp_path / "run.txt"), "--dataset", str(data)]
    commands = {
        "synth": (["synth", "--spec", str(tmp_path / "plan.txt"), "--out", str(data)], data),
        "train": (["train", *common, "--out", str(train_out)], train_out),
        "infer": (["infer", *common, "--checkpoint", str(train_out / "checkpoint"), "--out",
                   str(tmp_path / "infer")], tmp_path / "infer"),
        "eval": (["eval", *common, "--checkpoint", str(train_out / "checkpoint"), "--out",
                  str(tmp_path / "eval")], tmp_path / "eval"),
        "gradcheck": (["gradcheck", "--seed", "2", "--out", str(tmp_path / "gc")], tmp_path / "gc"),
    }
    differing = []
    for name, (argv, out) in commands.items():
        runs = []
        for _ in range(2):
            if out.exists():
                shutil.rmtree(out)
            capsys.readouterr()
            code = cli_run(argv)
            runs.append((code, capsys.readouterr().out, _snapshot(out)))
        if runs[0] != runs[1] or runs[0][0] != 0:
            differing.append(name)
    ok = not differing
    assert report(9, ok, f"{len(commands)} subcommands run twice; differing: {differing or 'none'}")
