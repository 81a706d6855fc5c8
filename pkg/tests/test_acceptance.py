"""Release gate: one test per acceptance criterion, slowest checks in the suite.

Every test here exercises the package end to end the way a user would
(public API only, fixed seeds) and finishes with a single PASS line carrying
the measured numbers, so a verbose run doubles as a report.  Training-based
checks pin exact hyperparameters; they are part of the contract, not tuning
suggestions.
"""

import copy
import math
import time

import numpy as np
import pytest

import nel.autodiff as ad
from nel import datagen, losses, metrics, trainer, unet


def _freeze(samples, split="train"):
    # Drop the clean backing so the trainer cannot renoise between epochs:
    # overfitting targets fixed inputs.
    out = []
    for s in samples:
        if s.split != split:
            continue
        c = copy.copy(s)
        c.clean = None
        out.append(c)
    return out


# ---------------------------------------------------------------- gradients

def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return rng.uniform(lo, hi, shape) * sign


def _param(data):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _op_cases(rng):
    """(name, f, wrt) triples covering every differentiable op.

    Each op is read out through a fixed random projection (a linear
    functional), and inputs stay bounded away from the points where the op's
    gradient vanishes, so every checked gradient entry is O(1) and the
    rel-err comparison is meaningful at 1e-5.
    """
    sh = (2, 3, 6, 6)
    a = _param(rng.uniform(-1, 1, sh))
    b = _param(rng.uniform(-1, 1, sh))
    m1 = _param(_away_from_zero(rng, sh, lo=0.3))
    m2 = _param(_away_from_zero(rng, sh, lo=0.3))
    d = _param(_away_from_zero(rng, sh, lo=0.5, hi=1.5))
    r = _param(_away_from_zero(rng, sh))  # |x| >= 0.1 keeps relu off its kink
    # distinct pool entries with gaps >> eps so the argmax cannot flip
    pool = _param(0.1 * rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8)
                  + rng.uniform(-0.02, 0.02, (2, 3, 8, 8)))
    x = _param(rng.uniform(-1, 1, (2, 3, 8, 8)))
    x9 = _param(rng.uniform(-1, 1, (2, 3, 9, 9)))  # stride 2 needs odd sides
    w3 = _param(rng.uniform(-0.5, 0.5, (4, 3, 3, 3)))
    b3 = _param(rng.uniform(-0.5, 0.5, (1, 4, 1, 1)))
    w1 = _param(rng.uniform(-0.5, 0.5, (2, 3, 1, 1)))
    b1 = _param(rng.uniform(-0.5, 0.5, (1, 2, 1, 1)))
    c2 = _param(rng.uniform(-1, 1, (2, 2, 6, 6)))
    c4 = _param(rng.uniform(-1, 1, (2, 4, 6, 6)))

    def proj(shape):
        return ad.Tensor(_away_from_zero(rng, shape, lo=0.5, hi=1.5))

    def dot(t, p):
        return ad.reduce_sum(ad.mul(t, p))

    p_el = proj(sh)
    p_c3 = proj((2, 4, 8, 8))
    p_s2 = proj((2, 4, 5, 5))
    p_c1 = proj((2, 2, 8, 8))
    p_mp = proj((2, 3, 4, 4))
    p_up = proj((2, 3, 12, 12))
    p_cat = proj((2, 9, 6, 6))

    y = _param(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
    lab_np = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float64)
    lab_np.flat[0] = 1.0  # at least one positive pixel
    lab = ad.Tensor(lab_np)
    # keep |y - target| >= 0.1 so no squared-error gradient entry is tiny
    tgt = ad.Tensor(y.data + _away_from_zero(rng, y.data.shape, hi=0.8))
    clean = ad.Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))

    return [
        ("add", lambda: dot(ad.add(a, b), p_el), [a, b]),
        ("sub", lambda: dot(ad.sub(a, b), p_el), [a, b]),
        ("mul", lambda: dot(ad.mul(m1, m2), p_el), [m1, m2]),
        ("div", lambda: dot(ad.div(m1, d), p_el), [m1, d]),
        ("add_scalar", lambda: dot(ad.add_scalar(a, 0.7), p_el), [a]),
        ("mul_scalar", lambda: dot(ad.mul_scalar(a, -1.3), p_el), [a]),
        ("square", lambda: dot(ad.square(m1), p_el), [m1]),
        ("relu", lambda: dot(ad.relu(r), p_el), [r]),
        ("sigmoid", lambda: dot(ad.sigmoid(a), p_el), [a]),
        ("reduce_sum", lambda: ad.reduce_sum(ad.mul(a, d)), [a]),
        ("reduce_mean", lambda: ad.reduce_mean(ad.mul(a, d)), [a]),
        ("conv3x3", lambda: dot(ad.conv2d(x, w3, b3, stride=1, pad=1), p_c3), [x, w3, b3]),
        ("conv3x3_s2", lambda: dot(ad.conv2d(x9, w3, b3, stride=2, pad=1), p_s2), [x9, w3, b3]),
        ("conv1x1", lambda: dot(ad.conv2d(x, w1, b1, stride=1, pad=0), p_c1), [x, w1, b1]),
        ("maxpool2", lambda: dot(ad.maxpool2(pool), p_mp), [pool]),
        ("upsample2", lambda: dot(ad.upsample2(a), p_up), [a]),
        ("concat", lambda: dot(ad.concat_channels([c2, a, c4]), p_cat), [c2, a, c4]),
        ("dice_loss", lambda: losses.dice_loss(y, lab).value, [y]),
        ("l2_loss", lambda: losses.l2_loss(y, tgt).value, [y]),
        ("edge_loss", lambda: losses.edge_preservation_loss(y, clean).value, [y]),
    ]


def test_gradient_integrity():
    t0 = time.perf_counter()
    worst_op = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, f, wrt in _op_cases(rng):
            err = ad.grad_check(f, wrt, eps=1e-5, seed=seed)
            assert err <= 1e-5, f"{name} seed {seed}: rel err {err:.3e}"
            worst_op = max(worst_op, err)

    # end to end through a reduced network; nudge every parameter off the
    # zero-bias init so no relu sits exactly on its kink
    model = unet.build(unet.UNetSpec.create(base_width=4), seed=0, dtype="f64")
    nudge = np.random.default_rng(123)
    for _, p in sorted(model.params.items()):
        p.data += nudge.uniform(-1e-3, 1e-3, p.data.shape)
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
    lab = ad.Tensor((rng.random((1, 1, 16, 16)) < 0.2).astype(np.float64))
    wrt = [p for _, p in sorted(model.params.items())]
    err_e2e = ad.grad_check(
        lambda: losses.dice_loss(unet.forward(model, x), lab).value,
        wrt, eps=1e-5, max_checks_per_input=4, seed=0)
    assert err_e2e <= 1e-4, f"end-to-end rel err {err_e2e:.3e}"

    dt = time.perf_counter() - t0
    assert dt < 120.0, f"gradient suite took {dt:.0f}s"
    print(f"PASS gradient-integrity: ops {worst_op:.2e}, end-to-end {err_e2e:.2e}, {dt:.0f}s")


# ------------------------------------------------------------------ metrics

def test_metric_oracles():
    rng = np.random.default_rng(2)
    z, o = np.zeros((16, 16)), np.ones((16, 16))
    pairs = [(z, z), (o, z), (z, o), (o, o)]
    while len(pairs) < 1000:
        y = rng.random((16, 16))
        if len(pairs) % 3 == 0:
            y = (y < rng.uniform(0.05, 0.95)).astype(float)
        lab = (rng.random((16, 16)) < rng.uniform(0.05, 0.5)).astype(float)
        pairs.append((y, lab))
    for y, lab in pairs:
        got = metrics.strict_f_measure(y, lab, 0.5)
        tp = fp = fn = 0
        for rr in range(16):
            for cc in range(16):
                p, t = y[rr, cc] >= 0.5, lab[rr, cc] == 1
                tp += p and t
                fp += p and not t
                fn += t and not p
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert (got.tp, got.fp, got.fn) == (tp, fp, fn)
        assert (got.precision, got.recall, got.f) == (prec, rec, f)

    img = np.random.default_rng(3).random((32, 32))
    assert abs(metrics.ssim(img, img) - 1.0) <= 1e-9

    a = np.random.default_rng(4).random((32, 32)) * 0.9
    p = metrics.psnr(a, a + 1.0 / 255.0)
    assert p == pytest.approx(48.13, abs=0.01)

    s = metrics.ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.5))
    assert s == pytest.approx(0.8828, abs=1e-3)
    print(f"PASS metric-oracles: 1000 exact confusion matches, psnr {p:.4f}, "
          f"constant ssim {s:.4f}")


# -------------------------------------------------------------- noise model

def test_noise_model_statistics():
    clean = np.zeros((256, 256))
    clean[:, 128:] = 1.0
    bg_means, bg_stds = [], []
    contrast = {1.0: [], 2.0: []}
    for seed in range(100):
        for snr in (1.0, 2.0):
            noisy = datagen.apply_noise_model(clean, snr, seed)
            bg, fg = noisy[:, :128], noisy[:, 128:]
            contrast[snr].append(fg.mean() - bg.mean())
            if snr == 2.0:
                bg_means.append(bg.mean())
                bg_stds.append(bg.std())
    m, s = np.mean(bg_means), np.mean(bg_stds)
    assert m == pytest.approx(0.45, abs=0.005)
    assert s == pytest.approx(0.10, abs=0.005)
    for snr, vals in contrast.items():
        assert np.mean(vals) == pytest.approx(0.1 * snr, abs=0.01)
    print(f"PASS noise-model: background {m:.4f}/{s:.4f}, contrast "
          f"{np.mean(contrast[1.0]):.4f}@1 {np.mean(contrast[2.0]):.4f}@2")


# ----------------------------------------------------------- learning sanity

# Overfit target: 8 fixed 64x64 samples at snr 2 (4 patterns x 2 noise
# draws).  Collapse to the all-zero prediction is a real failure mode of
# this loss (it is a stationary point that f32 sigmoid underflow makes
# permanent), hence full-batch f64 steps and this specific seed triple;
# see the probe notes in the repo history before retuning.
OVERFIT = dict(dseed=11, mseed=3, dtype="f64",
               epochs=500, batch_size=8, lr=2e-3, beta2=0.99, seed=3)


def test_learning_sanity():
    t0 = time.perf_counter()
    man, samples = datagen.build_edge_dataset(
        5, size=(64, 64), snrs=(2.0, 2.0), use_hflip=False,
        pure_noise_fraction=0.0, train_frac=0.8, seed=OVERFIT["dseed"])
    train8 = _freeze(samples)
    assert len(train8) == 8
    assert all(s.tag == 2.0 for s in train8)
    model = unet.build(unet.UNetSpec.create(base_width=8),
                       seed=OVERFIT["mseed"], dtype=OVERFIT["dtype"])
    cfg = trainer.TrainConfig(task="edges", epochs=OVERFIT["epochs"],
                              batch_size=OVERFIT["batch_size"], lr=OVERFIT["lr"],
                              beta2=OVERFIT["beta2"], seed=OVERFIT["seed"],
                              eval_every=10**6)
    steps = cfg.epochs * math.ceil(len(train8) / cfg.batch_size)
    assert steps <= 500
    res = trainer.train(cfg, man, train8, model)

    # dice reached on the 8 samples themselves (final weights, no flips)
    x = np.stack([s.input for s in train8])[:, None, :, :].astype(np.float64)
    t = np.stack([s.label for s in train8])[:, None, :, :].astype(np.float64)
    with ad.no_grad():
        dice = losses.dice_loss(unet.forward(model, ad.Tensor(x)),
                                ad.Tensor(t)).item()
    f = trainer.evaluate(model, train8, "edges", threshold=0.5).overall["f_mean"]
    dt = time.perf_counter() - t0
    assert dt < 600.0, f"overfit run took {dt:.0f}s"
    assert dice <= -0.35, f"dice loss reached {dice:.3f}"
    assert f >= 0.7, f"train strict F reached {f:.3f}"
    print(f"PASS learning-sanity: dice {dice:.4f} (last train row "
          f"{res.rows[-1]['loss']:.4f}), train F {f:.3f}, {steps} steps, {dt:.0f}s")


# ---------------------------------------------------------------- snr trend

def test_snr_trend():
    man, samples = datagen.build_edge_dataset(50, size=(64, 64), seed=13)
    model = unet.build(unet.UNetSpec.create(base_width=8), seed=1, dtype="f32")
    cfg = trainer.TrainConfig(task="edges", epochs=20, batch_size=4, lr=5e-4,
                              seed=9, eval_every=10**6)
    trainer.train(cfg, man, samples, model)
    rows = trainer.snr_sweep(model, (1.0, 1.4, 2.0), iterations=10, seed=0,
                             size=(64, 64))
    f = {(snr, method): fm for snr, method, fm, _ in rows}
    assert f[(1.0, "model")] < f[(1.4, "model")] < f[(2.0, "model")]
    assert f[(1.0, "model")] > f[(1.0, "canny")]
    print(f"PASS snr-trend: model F {f[(1.0, 'model')]:.3f}/"
          f"{f[(1.4, 'model')]:.3f}/{f[(2.0, 'model')]:.3f} vs canny "
          f"{f[(1.0, 'canny')]:.3f} at snr 1")


# ------------------------------------------------------------------ denoise

DENOISE = dict(bases=18, dseed=0, mseed=1, epochs=40, batch_size=4, lr=1e-3, seed=11)


def _denoise_leg(lambda_edge):
    man, samples = datagen.build_denoise_dataset(
        DENOISE["bases"], size=(128, 128), sigmas=(25.0,), seed=DENOISE["dseed"])
    train16 = _freeze(samples)
    assert len(train16) == 16
    model = unet.build(unet.UNetSpec.create(base_width=8),
                       seed=DENOISE["mseed"], dtype="f32")
    cfg = trainer.TrainConfig(task="denoise", epochs=DENOISE["epochs"],
                              batch_size=DENOISE["batch_size"], lr=DENOISE["lr"],
                              lambda_edge=lambda_edge, seed=DENOISE["seed"],
                              eval_every=10**6)
    trainer.train(cfg, man, train16, model)
    rep = trainer.evaluate(model, train16, "denoise")
    noisy = float(np.mean([metrics.psnr(s.input, s.label) for s in train16]))
    return noisy, rep.overall["psnr_mean"], rep.overall["ssim_mean"]


def test_denoising_sanity():
    noisy, psnr0, ssim0 = _denoise_leg(0.0)
    assert psnr0 - noisy >= 3.0, f"psnr gain {psnr0 - noisy:.2f} dB"
    _, psnr1, ssim1 = _denoise_leg(1.0)
    assert ssim1 >= ssim0 - 0.005, f"ssim {ssim1:.4f} vs {ssim0:.4f}"
    print(f"PASS denoising-sanity: psnr {noisy:.2f} -> {psnr0:.2f} dB, "
          f"ssim {ssim0:.4f} -> {ssim1:.4f} with edge term")


# ------------------------------------------------------------------ scaling

def test_linear_scaling():
    model = unet.build(unet.UNetSpec.create(base_width=8), seed=0, dtype="f32")
    rows = trainer.bench_forward(model, (128, 256), repeat=5)
    ratio = rows[1][1] / rows[0][1]
    assert 3.0 <= ratio <= 6.0, f"256^2/128^2 forward ratio {ratio:.2f}"
    print(f"PASS linear-scaling: {rows[0][1]:.1f} ms -> {rows[1][1]:.1f} ms, "
          f"ratio {ratio:.2f}")


# -------------------------------------------------------------- determinism

def _train_once(tmp_path, tag):
    man, samples = datagen.build_edge_dataset(6, size=(32, 32), snrs=(1.5, 2.0),
                                              seed=21)
    model = unet.build(unet.UNetSpec.create(base_width=2), seed=4, dtype="f32")
    cfg = trainer.TrainConfig(task="edges", epochs=2, batch_size=4, lr=1e-3,
                              seed=6, checkpoint_path=str(tmp_path / f"{tag}.nel"))
    res = trainer.train(cfg, man, samples, model)
    rep = trainer.evaluate(model, samples, "edges", noise_redraws=2, seed=5)
    return model, res, rep


def test_determinism(tmp_path):
    for builder, kw in ((datagen.build_edge_dataset, dict(size=(32, 32))),
                        (datagen.build_denoise_dataset, dict(sigmas=(15.0, 50.0), size=(64, 64)))):
        m1, s1 = builder(4, seed=5, **kw)
        m2, s2 = builder(4, seed=5, **kw)
        assert m1 == m2
        for a, b in zip(s1, s2):
            assert np.array_equal(a.input, b.input)
            assert np.array_equal(a.label, b.label)

    model1, res1, rep1 = _train_once(tmp_path, "a")
    model2, res2, rep2 = _train_once(tmp_path, "b")
    for name in model1.params:
        assert np.array_equal(model1.params[name].data, model2.params[name].data)
    keys = ("epoch", "step", "loss", "loss_l2", "loss_edge", "eval_metric")
    assert [{k: r[k] for k in keys} for r in res1.rows] == \
           [{k: r[k] for k in keys} for r in res2.rows]
    assert rep1.to_json() == rep2.to_json()

    loaded = unet.load_checkpoint(tmp_path / "a.nel", model1.spec)
    for name in model1.params:
        assert np.array_equal(loaded.params[name].data, model1.params[name].data)
    print("PASS determinism: datagen, training, evaluation, checkpoint all bitwise")
