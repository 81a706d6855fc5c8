"""Command-line front end.

Subcommands: gen-edges, gen-denoise, train, eval, detect, denoise, bench,
gradcheck, snr-sweep.  Exit codes: 0 success, 1 expected failure (contract,
format, IO) with a one-line diagnostic on stderr, 2 usage errors (argparse).
Every run writes its fully resolved configuration, defaults included, to a
sidecar run-config.json next to its primary output.

Numeric CSV output uses 6 significant digits with '.' as the decimal
separator; charts are standalone SVG polylines with no plotting dependency.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen, filters, losses, metrics, pgm, trainer, unet
from .errors import NelError


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".6g")
    return str(x)


def _write_sidecar(out_hint, command: str, args: argparse.Namespace) -> None:
    """Record the resolved config.  out_hint: directory or file the command writes."""
    if out_hint is None:
        target = Path("run-config.json")
    else:
        p = Path(out_hint)
        base = p if (p.suffix == "" or p.is_dir()) else p.parent
        base.mkdir(parents=True, exist_ok=True)
        target = base / "run-config.json"
    config = {"command": command}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        config[k] = str(v) if isinstance(v, Path) else v
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise NelError(f"expected a comma-separated float list, got {text!r}") from None


def _parse_ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise NelError(f"expected a comma-separated int list, got {text!r}") from None


def _load_model(ckpt_path) -> unet.Model:
    meta = unet.read_checkpoint_meta(ckpt_path)
    spec = unet.UNetSpec.create(int(meta["in_channels"]), int(meta["base_width"]))
    return unet.load_checkpoint(ckpt_path, spec)


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_edges(args) -> int:
    manifest, samples = datagen.build_edge_dataset(
        base_count=args.base,
        size=(args.size, args.size),
        snrs=_parse_floats(args.snrs),
        use_hflip=not args.no_hflip,
        pure_noise_fraction=args.pure_noise_frac,
        train_frac=args.train_frac,
        seed=args.seed,
    )
    datagen.save_dataset(args.out, manifest, samples)
    _write_sidecar(args.out, "gen-edges", args)
    n_train = sum(1 for s in samples if s.split == "train")
    print(f"wrote {len(samples)} samples ({n_train} train / {len(samples) - n_train} test) to {args.out}")
    return 0


def _cmd_gen_denoise(args) -> int:
    manifest, samples = datagen.build_denoise_dataset(
        base_count=args.count,
        size=(args.size, args.size),
        sigmas=_parse_floats(args.sigmas),
        train_frac=args.train_frac,
        seed=args.seed,
    )
    datagen.save_dataset(args.out, manifest, samples)
    _write_sidecar(args.out, "gen-denoise", args)
    print(f"wrote {len(samples)} noisy/clean pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    manifest = datagen.load_manifest(args.data)
    samples = datagen.materialize_samples(manifest)
    config = trainer.TrainConfig(
        task=manifest.task,
        epochs=args.epochs,
        batch_size=args.batch,
        optimizer=args.optimizer,
        lr=args.lr,
        momentum=args.momentum,
        lambda_edge=args.lambda_edge,
        seed=args.seed,
        eval_every=args.eval_every,
        checkpoint_path=args.ckpt,
        crop=args.crop,
        clip_norm=None if args.no_clip else args.clip_norm,
        threshold=args.threshold,
    )
    if args.resume:
        model = _load_model(args.resume)
    else:
        spec = unet.UNetSpec.create(in_channels=1, base_width=args.width)
        model = unet.build(spec, seed=args.seed, dtype=args.dtype)
    log_path = str(args.ckpt) + ".log.csv"
    result = trainer.train(
        config, manifest, samples, model,
        resume_from=args.resume, log_path=log_path,
    )
    _write_sidecar(args.ckpt, "train", args)
    last = result.rows[-1] if result.rows else {}
    print(
        f"trained {result.epochs_run} epochs; final loss {_fmt(last.get('loss', float('nan')))}; "
        f"checkpoint {result.final_path}; log {log_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    # scores exactly what is on disk (8-bit quantized PGMs)
    manifest, samples = datagen.load_dataset(args.data)
    if args.redraws > 0:
        # noise re-draws need the clean sources, which only regeneration has
        clean_by_id = {s.id: s.clean for s in datagen.materialize_samples(manifest)}
        for s in samples:
            s.clean = clean_by_id.get(s.id)
    split = [s for s in samples if s.split == args.split]
    report = trainer.evaluate(
        model, split, manifest.task,
        threshold=args.threshold, noise_redraws=args.redraws, seed=args.seed,
        peak255=args.peak255,
    )
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    _write_sidecar(args.out or None, "eval", args)
    print(text)
    return 0


def _cmd_detect(args) -> int:
    model = _load_model(args.ckpt)
    img = pgm.read_pgm(getattr(args, "in"))
    out = trainer._forward_2d(model, img)
    if args.threshold is not None:
        out = (out >= args.threshold).astype(np.float64)
    pgm.write_pgm(args.out, out)
    _write_sidecar(args.out, "detect", args)
    print(f"wrote {args.out}")
    return 0


def _cmd_denoise(args) -> int:
    model = _load_model(args.ckpt)
    img = pgm.read_pgm(getattr(args, "in"))
    out = trainer._forward_2d(model, img)
    pgm.write_pgm(args.out, out)
    _write_sidecar(args.out, "denoise", args)
    print(f"wrote {args.out}")
    return 0


def _cmd_bench(args) -> int:
    model = _load_model(args.ckpt)
    rows = trainer.bench_forward(model, _parse_ints(args.sizes), repeat=args.repeat)
    lines = ["size,median_ms"] + [f"{size},{_fmt(ms)}" for size, ms in rows]
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    _write_sidecar(args.out or None, "bench", args)
    print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    """Finite-difference verification of every op and the reduced network."""
    failures = 0
    rng = np.random.default_rng(args.seed)

    def report(name, err, tol):
        nonlocal failures
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e} (tol {tol:g})")

    def t(shape):
        return ad.Tensor(rng.standard_normal(shape), requires_grad=True, dtype="f64")

    for seed_i in range(args.seeds):
        x = t((1, 2, 6, 6))
        w = t((3, 2, 3, 3))
        b = t((1, 3, 1, 1))
        report(
            f"conv2d[seed {seed_i}]",
            ad.grad_check(lambda: ad.reduce_sum(ad.mul(ad.conv2d(x, w, b, pad=1), ad.conv2d(x, w, b, pad=1))), [x, w, b], eps=args.eps),
            args.tol,
        )
        y = t((2, 1, 4, 4))
        report(
            f"pool/upsample/sigmoid[seed {seed_i}]",
            ad.grad_check(
                lambda: ad.reduce_mean(ad.sigmoid(ad.upsample2(ad.maxpool2(y)))), [y], eps=args.eps
            ),
            args.tol,
        )
    spec = unet.UNetSpec.create(1, base_width=2)
    model = unet.build(spec, seed=args.seed, dtype="f64")
    xin = ad.Tensor(rng.uniform(0.3, 0.7, (1, 1, 8, 8)), dtype="f64")
    label = ad.Tensor((rng.random((1, 1, 8, 8)) < 0.2).astype(np.float64), dtype="f64")
    params = model.parameters()
    err = ad.grad_check(
        lambda: losses.dice_loss(unet.forward(model, xin), label).value,
        params,
        eps=args.eps,
        max_checks_per_input=args.samples_per_tensor,
        floor=1e-5,
    )
    report("unet-end-to-end(width 2, 8x8)", err, 1e-4)
    _write_sidecar(None, "gradcheck", args)
    return 0 if failures == 0 else 1


def _cmd_snr_sweep(args) -> int:
    model = _load_model(args.ckpt)
    rows = trainer.snr_sweep(
        model,
        snrs=_parse_floats(args.snrs),
        iterations=args.iterations,
        seed=args.seed,
        size=(args.size, args.size),
        threshold=args.threshold,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "snr_sweep.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("snr,method,f_mean,f_std\n")
        for snr, method, f_mean, f_std in rows:
            fh.write(f"{_fmt(snr)},{method},{_fmt(f_mean)},{_fmt(f_std)}\n")
    series = {}
    for snr, method, f_mean, _ in rows:
        series.setdefault(method, []).append((snr, f_mean))
    _write_svg_chart(out_dir / "snr_sweep.svg", series, "strict F vs snr", "snr", "F")
    _write_sidecar(args.out, "snr-sweep", args)
    for snr, method, f_mean, f_std in rows:
        print(f"snr={_fmt(snr)} {method}: F = {_fmt(f_mean)} (std {_fmt(f_std)})")
    return 0


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _write_svg_chart(path, series: dict, title: str, xlabel: str, ylabel: str) -> None:
    """Minimal polyline chart: axes, per-series colored lines, small legend."""
    W, H = 640, 420
    ml, mr, mt, mb = 60, 20, 40, 50
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1e-9, max(ys))
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * (W - ml - mr)

    def sy(y):
        return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{H - mb}" x2="{W - mr}" y2="{H - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{H - mb}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{H / 2}" font-size="12" transform="rotate(-90 16 {H / 2})">{ylabel}</text>',
        f'<text x="{ml}" y="{H - mb + 16}" font-size="10" text-anchor="middle">{_fmt(float(x0))}</text>',
        f'<text x="{W - mr}" y="{H - mb + 16}" font-size="10" text-anchor="middle">{_fmt(float(x1))}</text>',
        f'<text x="{ml - 6}" y="{H - mb}" font-size="10" text-anchor="end">{_fmt(float(y0))}</text>',
        f'<text x="{ml - 6}" y="{mt + 4}" font-size="10" text-anchor="end">{_fmt(float(y1))}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{W - mr - 120}" y="{mt + 16 + 16 * i}" font-size="12" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nel", description="noisy-image edge lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-edges", help="generate the synthetic faint-edge dataset")
    g.add_argument("--base", type=int, required=True, help="number of base binary patterns")
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--snrs", default="1.0,1.2,1.4,1.6,1.8,2.0")
    g.add_argument("--no-hflip", action="store_true")
    g.add_argument("--pure-noise-frac", type=float, default=0.02)
    g.add_argument("--train-frac", type=float, default=0.9)
    g.set_defaults(func=_cmd_gen_edges)

    g = sub.add_parser("gen-denoise", help="generate noisy/clean grayscale pairs")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigmas", default="15,25,50")
    g.add_argument("--train-frac", type=float, default=0.9)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_denoise)

    g = sub.add_parser("train", help="train on a generated dataset")
    g.add_argument("--data", required=True)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--lambda-edge", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--crop", type=int, default=None)
    g.add_argument("--clip-norm", type=float, default=10.0)
    g.add_argument("--no-clip", action="store_true")
    g.add_argument("--eval-every", type=int, default=1)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    g.add_argument("--resume", default=None)
    g.set_defaults(func=_cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--split", choices=("train", "test"), default="test")
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--redraws", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--peak255", action="store_true", help="report PSNR on the 0-255 scale")
    g.add_argument("--out", default=None)
    g.set_defaults(func=_cmd_eval)

    g = sub.add_parser("detect", help="run the edge detector on one PGM image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--threshold", type=float, default=None)
    g.set_defaults(func=_cmd_detect)

    g = sub.add_parser("denoise", help="run the denoiser on one PGM image")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_denoise)

    g = sub.add_parser("bench", help="median forward time per input size")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--sizes", default="128,256")
    g.add_argument("--repeat", type=int, default=5)
    g.add_argument("--out", default=None)
    g.set_defaults(func=_cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--seeds", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--samples-per-tensor", type=int, default=64)
    g.set_defaults(func=_cmd_gradcheck)

    g = sub.add_parser("snr-sweep", help="model vs Canny F-scores across snr levels")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--snrs", default="1.0,1.2,1.4,1.6,1.8,2.0")
    g.add_argument("--iterations", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_snr_sweep)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
