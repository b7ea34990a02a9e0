"""Command-line entry point: ``ppgn <subcommand> [options]``.

Settings come from an optional ``--config`` key=value file; flags given on
the command line override it.  Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, io, nets
from . import variants as V
from .samplers import SamplerConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out_dir")
    p.add_argument("--images", help="IDX image file (default: bundled digits)")
    p.add_argument("--labels", help="IDX label file")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch_size", type=int)
    p.add_argument("--out", required=True, help="checkpoint path to write")


def _add_sampling(p):
    p.add_argument("--variant", choices=V.VARIANTS)
    for k in ("eps1", "eps2", "eps3", "context_weight", "lambda_decay"):
        p.add_argument(f"--{k}", type=float)
    for k in ("steps", "chains", "target_class", "hidden_unit", "stride"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--hidden_layer")
    for k in ("classifier", "generator", "dae_x", "dae_h"):
        p.add_argument(f"--{k}", help="checkpoint path")
    p.add_argument("--heldout", help="held-out classifier checkpoint for the report")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppgn", description="Plug-and-play generative sampling at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="write the bundled digits as IDX train/test files")
    p.add_argument("--out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-classifier", help="train the classifier / encoder")
    _add_common(p)
    _add_training(p)
    p.add_argument("--shift_augment", type=int, choices=(0, 1), default=1)

    p = sub.add_parser("train-dae", help="train a denoising autoencoder in pixel or code space")
    _add_common(p)
    _add_training(p)
    p.add_argument("--space", choices=("x", "h"), required=True)
    p.add_argument("--sigma", type=float, help="training noise std (default: 0.2 for x, 10%% of mean code for h)")
    p.add_argument("--classifier", help="encoder checkpoint (needed for --space h)")

    p = sub.add_parser("train-generator", help="train the generator against a frozen encoder")
    _add_common(p)
    _add_training(p)
    p.add_argument("--mode", choices=("noiseless", "joint"), default="noiseless")
    p.add_argument("--classifier", required=False, help="frozen encoder checkpoint")
    p.add_argument("--discriminator_out", help="optional checkpoint path for the discriminator")

    p = sub.add_parser("sample", help="run sampling chains and write a grid and report")
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--sweep", choices=("eps1", "eps3"), help="run the variant once per value of a sweep grid")

    p = sub.add_parser("inpaint", help="fill a masked square of real images")
    _add_common(p)
    _add_sampling(p)
    for k in ("mask_x", "mask_y", "mask_w", "mask_h"):
        p.add_argument(f"--{k}", type=int)

    p = sub.add_parser("eval", help="score a samples file")
    _add_common(p)
    p.add_argument("--samples", required=True, help="samples file written by 'sample'")
    p.add_argument("--classifier")
    p.add_argument("--heldout")
    p.add_argument("--threshold", type=float)
    return parser


# settings that are not RunConfig keys
_LOCAL = {"command", "config", "out", "space", "sigma", "mode", "sweep", "discriminator_out", "samples", "threshold",
          "epochs", "lr", "batch_size", "shift_augment", "lambda_decay", "stride"}


def _run_config(args) -> io.RunConfig:
    cfg = io.load_run_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    flags = {k: v for k, v in vars(args).items() if k not in _LOCAL and v is not None}
    return cfg.update(flags)


def _dataset(cfg: io.RunConfig) -> tuple[data.Dataset, data.Dataset | None]:
    if cfg.images or cfg.labels:
        if not (cfg.images and cfg.labels):
            raise UsageError("--images and --labels must be given together")
        return io.load_idx(cfg.images, cfg.labels), None
    d = data.mnist_dir()
    if d is not None:
        def path(stem):
            p = d / stem
            return p if p.exists() else d / f"{stem}.gz"
        return (io.load_idx(path("train-images-idx3-ubyte"), path("train-labels-idx1-ubyte")),
                io.load_idx(path("t10k-images-idx3-ubyte"), path("t10k-labels-idx1-ubyte")))
    return data.desk_split()


def _train_config(args, seed, **defaults) -> nets.TrainConfig:
    kw = dict(defaults, seed=seed)
    for k in ("epochs", "lr", "batch_size"):
        if getattr(args, k, None) is not None:
            kw[k] = getattr(args, k)
    return nets.TrainConfig(**kw)


def _need(cfg, key):
    value = getattr(cfg, key)
    if value is None:
        raise UsageError(f"--{key} is required")
    return io.load_checkpoint(value)


def _out_dir(cfg) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_prepare_data(args) -> None:
    train, test = data.desk_split(seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", train), ("t10k", test)):
        raw = np.floor(ds.images * 255.0 + 0.5).astype(np.uint8).reshape(-1, ds.rows, ds.cols)
        io.write_idx(out / f"{name}-images-idx3-ubyte", out / f"{name}-labels-idx1-ubyte", raw, ds.labels)
    print(f"wrote {len(train)} training and {len(test)} test digits to {out}")


def cmd_train_classifier(args) -> None:
    cfg = _run_config(args)
    train, test = _dataset(cfg)
    tc = _train_config(args, cfg.seed, lr=1e-3, epochs=40, lr_decay=0.93, weight_decay=1e-4,
                       shift_augment=bool(args.shift_augment), image_side=train.rows)
    test_pair = None if test is None else (test.images, test.labels)
    C = nets.train_classifier(train.images, train.labels, tc, test=test_pair)
    io.save_checkpoint(C, args.out)
    print(io.format_report(C.meta), end="")


def cmd_train_dae(args) -> None:
    cfg = _run_config(args)
    train, _ = _dataset(cfg)
    if args.space == "x":
        inputs, layers, sigma = train.images, nets.chain_specs(nets.X_DAE_DIMS, "relu", "sigmoid"), 0.2
    else:
        E = _need(cfg, "classifier")
        inputs = nets.encode(E, train.images, "h")
        layers = nets.chain_specs(nets.H_DAE_DIMS, "relu", "linear")
        sigma = 0.1 * float(inputs.mean())
    if args.sigma is not None:
        sigma = args.sigma
    R = nets.train_dae(inputs, sigma, _train_config(args, cfg.seed, epochs=30, lr=1e-3), layers=layers,
                       name=f"dae_{args.space}")
    io.save_checkpoint(R, args.out)
    print(io.format_report(R.meta), end="")


def cmd_train_generator(args) -> None:
    cfg = _run_config(args)
    train, _ = _dataset(cfg)
    E = _need(cfg, "classifier")
    sigmas = nets.joint_noise_sigmas(E, train.images) if args.mode == "joint" else None
    G, D = nets.train_generator(E, train.images, args.mode, noise_sigmas=sigmas,
                                config=_train_config(args, cfg.seed, epochs=30))
    io.save_checkpoint(G, args.out)
    if args.discriminator_out:
        io.save_checkpoint(D, args.discriminator_out)
    print(io.format_report(G.meta), end="")


def _condition(cfg, C) -> V.Condition:
    if cfg.hidden_layer is not None or cfg.hidden_unit is not None:
        if cfg.hidden_layer is None or cfg.hidden_unit is None:
            raise UsageError("--hidden_layer and --hidden_unit go together")
        return V.Condition(C, cfg.hidden_unit, kind="hidden_unit", layer=cfg.hidden_layer)
    if cfg.target_class is None:
        raise UsageError("give --target_class or --hidden_layer/--hidden_unit")
    return V.Condition(C, cfg.target_class)


def _spec(cfg, C, lambda_decay) -> V.VariantSpec:
    kind = cfg.variant
    G = _need(cfg, "generator") if kind != "ppgn_x" else None
    kw = {}
    if kind == "ppgn_x":
        kw["R_x"] = _need(cfg, "dae_x")
    elif kind == "ppgn_h":
        kw["R_h"] = _need(cfg, "dae_h")
    elif kind == "joint_ppgn_h":
        if G.meta.get("mode_joint"):
            kw["noise_sigmas"] = {k: G.meta[f"noise_{k}"] for k in ("x", "h1", "h")}
        else:
            kw["noise_sigmas"] = nets.joint_noise_sigmas(C, _dataset(cfg)[0].images)
    return V.VariantSpec(kind, G=G, E=C if kind in ("joint_ppgn_h", "noiseless_joint") else None,
                         lambda_decay=lambda_decay, **kw)


def _sampler_config(cfg, spec, **over) -> SamplerConfig:
    base = spec.default_config()
    kw = {k: getattr(cfg, k) for k in ("eps1", "eps2", "eps3") if getattr(cfg, k) is not None}
    return base.replace(steps=cfg.steps, seed=cfg.seed, **{**kw, **over})


def _init(spec, cfg, C, train, n):
    if spec.code_space:
        return V.random_codes(C, train.images, n, seed=cfg.seed)
    return np.random.default_rng(cfg.seed).random((n, C.in_dim))


def _summary(rec, C, cond, H=None) -> dict:
    final = rec.images[-1]
    conf = np.asarray(rec.confidences[-1])
    out = {"chains": len(final), "steps": rec.steps[-1], "final_confidence_mean": float(conf.mean()),
           "final_confidence_min": float(conf.min())}
    if cond.kind == "output_class":
        rep = evaluation.evaluate(np.concatenate(rec.images), np.resize(cond.targets(len(final)),
                                  len(final) * len(rec.images)), C, H or C, chain=rec if len(rec) > 10 else None)
        out.update({f"pooled_{k}": v for k, v in rep.as_dict().items()})
    return out


def _write_run(out_dir: Path, stem: str, rec, values: dict, side: int) -> None:
    final = rec.images[-1]
    io.write_grid(final, min(10, len(final)), out_dir / f"{stem}.pgm", side=side)
    io.save_arrays(out_dir / f"{stem}.samples", stem, {"final": final, "targets": values.pop("_targets"),
                                                        "confidence": np.asarray(rec.confidences[-1])})
    io.write_report(values, out_dir / f"{stem}.report")


def cmd_sample(args) -> None:
    cfg = _run_config(args)
    if cfg.classifier is None:
        raise UsageError("--classifier is required")
    C = io.load_checkpoint(cfg.classifier)
    H = io.load_checkpoint(cfg.heldout) if cfg.heldout else None
    cond = _condition(cfg, C)
    spec = _spec(cfg, C, args.lambda_decay or 0.0)
    train, _ = _dataset(cfg)
    side = int(round(np.sqrt(C.in_dim)))
    out = _out_dir(cfg)
    runs = [(cfg.variant, {})]
    if args.sweep:
        grid = V.EPS1_SWEEP if args.sweep == "eps1" else V.EPS3_SWEEP
        runs = [(f"{cfg.variant}_{args.sweep}_{v:g}", {args.sweep: v}) for v in grid]
    for stem, over in runs:
        sc = _sampler_config(cfg, spec, **over)
        rec = V.sample(spec, cond, _init(spec, cfg, C, train, cfg.chains), sc, stride=1 if args.stride is None else args.stride)
        values = {"eps1": sc.eps1, "eps2": sc.eps2, "eps3": sc.eps3, "seed": sc.seed, **_summary(rec, C, cond, H)}
        values["_targets"] = cond.targets(cfg.chains).astype(np.float64)
        _write_run(out, stem, rec, values, side)
        print(f"{stem}: wrote {out / stem}.pgm")


def cmd_inpaint(args) -> None:
    cfg = _run_config(args)
    if cfg.classifier is None:
        raise UsageError("--classifier is required")
    C = io.load_checkpoint(cfg.classifier)
    spec = _spec(cfg, C, args.lambda_decay or 0.0)
    if not spec.code_space:
        raise UsageError("inpainting needs a code-space variant")
    train, test = _dataset(cfg)
    pool = test if test is not None else train
    idx = np.random.default_rng(cfg.seed).choice(len(pool), cfg.chains, replace=False)
    side = pool.rows
    masked = [V.MaskedImage.patch(pool.images[i], cfg.mask_x, cfg.mask_y, cfg.mask_w, cfg.mask_h, side=side)
              for i in idx]
    if cfg.target_class is None and cfg.hidden_layer is None:
        cond = V.Condition(C, pool.labels[idx].tolist())
    else:
        cond = _condition(cfg, C)
    h0 = nets.encode(C, np.stack([m.clamp(np.full_like(m.x_real, 0.5)) for m in masked]), "h")
    sc = _sampler_config(cfg, spec)
    rec = V.inpaint(spec, masked, cond, h0, sc, context_weight=cfg.context_weight, stride=1 if args.stride is None else args.stride)
    out = _out_dir(cfg)
    final = rec.images[-1]
    io.write_grid(np.concatenate([np.stack([m.x_real for m in masked]), final]), len(final),
                  out / "inpaint.pgm", side=side)
    values = {"chains": len(final), "context_weight": cfg.context_weight,
              "final_confidence_mean": float(np.mean(rec.confidences[-1]))}
    io.write_report(values, out / "inpaint.report")
    print(f"wrote {out / 'inpaint.pgm'}")


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    C = _need(cfg, "classifier")
    H = io.load_checkpoint(cfg.heldout) if cfg.heldout else C
    _, arrays = io.load_arrays(args.samples)
    samples, targets = arrays["final"], arrays["targets"].astype(np.int64)
    train, _ = _dataset(cfg)
    reference = evaluation.least_diverse_ssim(train.images, train.labels)
    rep = evaluation.evaluate(samples, targets, C, H, threshold=0.97 if args.threshold is None else args.threshold, reference_ssim=reference)
    rep.extra["reference_ssim"] = reference
    out = _out_dir(cfg)
    io.write_report(rep, out / "eval.report")
    print(io.format_report(rep.as_dict()), end="")


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-classifier": cmd_train_classifier,
    "train-dae": cmd_train_dae,
    "train-generator": cmd_train_generator,
    "sample": cmd_sample,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        COMMANDS[args.command](args)
    except (UsageError, io.ConfigError) as exc:
        print(f"ppgn: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        print(f"ppgn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
