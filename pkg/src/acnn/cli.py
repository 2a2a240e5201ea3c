"""Command-line entry point: data generation, training stages, evaluation,
and latent-space analysis.

Configuration precedence: built-in defaults < config file (`key = value`
lines, '#' comments) < command-line flags. Unknown config keys are rejected.
Commands never overwrite existing outputs unless --force is given, and exit
nonzero if any invariant self-check fails.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import engine as E
from . import latent as L
from . import metrics as MT
from . import models as M
from . import phantom as P
from . import training as T
from .tenio import write_ten

CONFIG_FIELDS = {
    "n": int, "n_val": int, "n_test": int, "grid": str, "k": int,
    "sigma_mm": float, "motion": float, "pathology": int, "phases": int,
    "seed": int, "iterations": int, "lr": float, "batch_size": int,
    "lambda1": float, "lambda2": float, "multiplier": float, "split": str,
    "noise_std": float,
}


class CliError(RuntimeError):
    pass


def read_config(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in CONFIG_FIELDS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = CONFIG_FIELDS[key](raw.strip())
    return values


def merge_config(args):
    """defaults < config file < explicit flags (explicit flags are not None)."""
    if getattr(args, "config", None):
        for key, value in read_config(args.config).items():
            if getattr(args, key, None) is None:
                setattr(args, key, value)
    return args


def apply_defaults(args, defaults):
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def check_fresh(path, force, kind):
    path = Path(path)
    marker = {
        "dataset": path / "manifest.txt",
        "checkpoint": path / "checkpoint.txt",
        "file": path,
        "dir": path,
    }[kind]
    exists = marker.exists() and (kind != "dir" or any(path.iterdir()))
    if exists and not force:
        raise CliError(f"{marker} already exists; pass --force to overwrite")


def parse_grid(text):
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) not in (2, 3) or any(v < 1 for v in parts):
        raise CliError(f"bad grid {text!r}; expected e.g. 24,24,12")
    return parts


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    args = apply_defaults(args, dict(
        n_val=0, n_test=0, grid="24,24,12", k=3, sigma_mm=4.0, motion=3.0,
        pathology=0, phases=1, seed=0,
    ))
    spec = P.DatasetSpec(
        n_train=args.n, n_val=args.n_val, n_test=args.n_test,
        grid_xyz=parse_grid(args.grid), decimation=args.k,
        sigma_mm=args.sigma_mm, motion_max_shift=args.motion,
        pathology=bool(args.pathology), phases=args.phases,
    )
    check_fresh(args.out, args.force, "dataset")
    samples = P.make_dataset(spec, args.seed, args.out)
    total = spec.n_train + spec.n_val + spec.n_test
    if len(samples) != total:
        raise CliError(f"self-check failed: wrote {len(samples)} of {total} samples")
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(train {spec.n_train} / val {spec.n_val} / test {spec.n_test})")
    print(f"grid {spec.grid_xyz} decimation {spec.decimation} "
          f"sigma {spec.sigma_mm} mm, motion <= {spec.motion_max_shift} vox, "
          f"hash {P.dataset_hash(args.out)[:16]}")
    return 0


# ---------------------------------------------------------------------------
# train


def require_checkpoint(path, stage, needed_by):
    if path is None:
        raise CliError(
            f"stage {needed_by!r} requires a {stage} checkpoint; "
            f"run `acnn train {stage}` first and pass --{stage}"
        )
    kinds_ok = {"ae": ("autoencoder", "tl"), "predictor": ("predictor", "tl")}
    kind, ck_args, nets = M.load_checkpoint(path)
    if kind not in kinds_ok[stage]:
        raise CliError(f"{path} holds a {kind!r} checkpoint, not {stage!r}")
    return ck_args, nets


def build_train_config(args):
    return T.TrainConfig(
        lambda1=0.0 if args.baseline else args.lambda1,
        lambda2=args.lambda2,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        iterations=args.iterations,
        seed=args.seed,
        intensity_noise_std=args.noise_std,
    )


def verify_report(report, lambda1, joint=False):
    for row in report.rows:
        total, primary, latent, decay = row[1], row[2], row[3], row[4]
        expect = primary + (latent if joint else lambda1 * latent) + decay
        if abs(total - expect) > 1e-5 * max(1.0, abs(total)):
            raise CliError(
                f"self-check failed: loss components do not sum to total at "
                f"iteration {int(row[0])}"
            )


def cmd_train(args):
    args = apply_defaults(args, dict(
        seed=0, iterations=100, lr=0.001, batch_size=8, lambda1=0.01,
        lambda2=5e-6, multiplier=0.25, noise_std=0.0,
    ))
    dataset = P.load_dataset(args.data)
    train = dataset.split("train")
    if not train:
        raise CliError(f"{args.data}: dataset has no training split")
    grid = dataset.grid_xyz
    cfg = build_train_config(args)
    check_fresh(args.out, args.force, "checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    builder_args = dict(
        grid_xyz=grid, width_multiplier=args.multiplier, spatial_rank=len(grid),
        class_count=P.CLASS_COUNT, seed=args.seed,
    )
    if args.stage == "ae":
        enc, dec = M.build_autoencoder(grid, args.multiplier, len(grid),
                                       P.CLASS_COUNT, args.seed)
        report = T.train_ae_stage1(enc, dec, [s.labels for s in train], cfg)
        verify_report(report, cfg.lambda1)
        M.save_checkpoint(out, "autoencoder", builder_args,
                          {"encoder": enc, "decoder": dec})
    elif args.stage == "predictor":
        _, ae_nets = require_checkpoint(args.ae, "ae", "predictor")
        predictor = M.build_predictor(grid, args.multiplier, len(grid), args.seed)
        pairs = [(s.hr, s.labels) for s in train]
        report = T.train_predictor_stage1(predictor, ae_nets["encoder"], pairs, cfg)
        verify_report(report, cfg.lambda1)
        M.save_checkpoint(out, "predictor", builder_args, {"predictor": predictor})
    elif args.stage == "tl":
        ae_args, ae_nets = require_checkpoint(args.ae, "ae", "tl")
        pr_args, pr_nets = require_checkpoint(args.predictor, "predictor", "tl")
        pairs = [(s.hr, s.labels) for s in train]
        report = T.train_tl_joint_stage2(
            ae_nets["encoder"], ae_nets["decoder"], pr_nets["predictor"], pairs, cfg
        )
        verify_report(report, cfg.lambda1, joint=True)
        tl_args = dict(ae_args)
        tl_args["seed"] = args.seed
        M.save_checkpoint(out, "tl", tl_args, {
            "encoder": ae_nets["encoder"], "decoder": ae_nets["decoder"],
            "predictor": pr_nets["predictor"],
        })
    elif args.stage == "seg":
        encoder = None
        if not args.baseline and cfg.lambda1 != 0.0:
            _, nets = require_checkpoint(args.ae, "ae", "seg")
            encoder = nets["encoder"]
            encoder.set_trainable(False)
        lr_grid = grid[:-1] + (grid[-1] // dataset.decimation,)
        segnet = M.build_segnet(lr_grid, args.multiplier, len(grid), P.CLASS_COUNT,
                                dataset.decimation, args.seed)
        report = T.train_segmentation(segnet, encoder, train, cfg)
        verify_report(report, cfg.lambda1)
        seg_args = dict(builder_args, grid_xyz=lr_grid,
                        upsample_factor=dataset.decimation)
        M.save_checkpoint(out, "segnet", seg_args, {"segnet": segnet})
    elif args.stage == "sr":
        predictor = None
        if not args.baseline and cfg.lambda1 != 0.0:
            _, nets = require_checkpoint(args.predictor, "predictor", "sr")
            predictor = nets["predictor"]
            predictor.set_trainable(False)
        lr_grid = grid[:-1] + (grid[-1] // dataset.decimation,)
        srnet = M.build_srnet(lr_grid, args.multiplier, len(grid),
                              dataset.decimation, args.seed)
        report = T.train_sr(srnet, predictor, train, cfg)
        verify_report(report, cfg.lambda1)
        sr_args = dict(grid_xyz=lr_grid, width_multiplier=args.multiplier,
                       spatial_rank=len(grid), seed=args.seed,
                       upsample_factor=dataset.decimation)
        M.save_checkpoint(out, "srnet", sr_args, {"srnet": srnet})
    else:
        raise CliError(f"unknown stage {args.stage!r}")

    report.save(out / "report.txt")
    last = report.rows[-1] if report.rows else None
    print(f"stage {args.stage}: {len(report.rows)} iterations in "
          f"{report.wall_time:.1f}s -> {out}")
    if last:
        print(f"final loss {last[1]:.6f} (primary {last[2]:.6f}, "
              f"latent {last[3]:.6f}, decay {last[4]:.3e})")
    return 0


# ---------------------------------------------------------------------------
# eval


def segment_sample(segnet, sample, use_es=False):
    lr = sample.es_lr if use_es else sample.lr
    x = E.Tensor(lr.data[None, None])
    logits = segnet.forward(x, training=False)
    pred = M.labels_from_logits(E.Tensor(logits.data[0]))
    return P.LabelMap(pred, sample.labels.spacing)


def _fmt(value):
    return repr(float(value))


def eval_lines_seg(segnet, samples):
    lines = []
    per_metric = {}
    for s in samples:
        pred = segment_sample(segnet, s)
        values = {}
        for cls, cname in ((1, "endocardium"), (2, "myocardium")):
            values[f"dice/{cname}"] = MT.dice(pred, s.labels, cls)
            try:
                rep = MT.surface_distances(pred, s.labels, cls)
                values[f"msd_mm/{cname}"] = rep.mean_distance_mm
                values[f"hausdorff_mm/{cname}"] = rep.hausdorff_mm
            except MT.EmptySurfaceError:
                lines.append(f"sample {s.sample_id} metric=surface/{cname} error=empty-surface")
        values["volume_ml/pool_pred"] = MT.volume_ml(pred, 1)
        values["volume_ml/pool_true"] = MT.volume_ml(s.labels, 1)
        if s.es_labels is not None:
            pred_es = segment_sample(segnet, s, use_es=True)
            try:
                values["ef/pred"] = MT.ejection_fraction(pred, pred_es)
            except ValueError:
                lines.append(f"sample {s.sample_id} metric=ef/pred error=zero-edv")
            values["ef/true"] = MT.ejection_fraction(s.labels, s.es_labels)
        for key, val in values.items():
            lines.append(f"sample {s.sample_id} metric={key} value={_fmt(val)}")
            per_metric.setdefault(key, []).append(float(val))
    return lines, per_metric


def eval_lines_sr(srnet, samples, decimation):
    lines = []
    per_metric = {}
    for s in samples:
        x = E.Tensor(s.lr.data[None, None])
        out = srnet.forward(x, training=False)
        sr_vol = P.Volume(out.data[0, 0], s.hr.spacing)
        linear = P.upsample_linear_z(s.lr, decimation)
        values = {
            "ssim/model": MT.ssim(sr_vol, s.hr),
            "ssim/linear": MT.ssim(P.Volume(linear.data, s.hr.spacing), s.hr),
        }
        for key, val in values.items():
            lines.append(f"sample {s.sample_id} metric={key} value={_fmt(val)}")
            per_metric.setdefault(key, []).append(float(val))
    return lines, per_metric


def eval_lines_ae(nets, samples):
    lines = []
    per_metric = {}
    enc, dec = nets["encoder"], nets["decoder"]
    for s in samples:
        hot = M.one_hot_batch([s.labels.data], P.CLASS_COUNT)
        code = enc.forward(hot, training=False)
        logits = dec.forward(E.Tensor(code.data), training=False)
        pred = P.LabelMap(M.labels_from_logits(E.Tensor(logits.data[0])),
                          s.labels.spacing)
        for cls, cname in ((1, "endocardium"), (2, "myocardium")):
            val = MT.dice(pred, s.labels, cls)
            key = f"recon_dice/{cname}"
            lines.append(f"sample {s.sample_id} metric={key} value={_fmt(val)}")
            per_metric.setdefault(key, []).append(val)
    return lines, per_metric


def cmd_eval(args):
    args = apply_defaults(args, dict(split="test", seed=0))
    kind, ck_args, nets = M.load_checkpoint(args.checkpoint)
    dataset = P.load_dataset(args.data)
    samples = dataset.split(args.split) or dataset.samples
    if not samples:
        raise CliError(f"{args.data}: no samples in split {args.split!r}")
    if kind == "segnet":
        lines, per_metric = eval_lines_seg(nets["segnet"], samples)
    elif kind == "srnet":
        lines, per_metric = eval_lines_sr(nets["srnet"], samples, dataset.decimation)
    elif kind in ("autoencoder", "tl"):
        lines, per_metric = eval_lines_ae(nets, samples)
    else:
        raise CliError(f"cannot evaluate checkpoint kind {kind!r}")

    for key in sorted(per_metric):
        vals = np.asarray(per_metric[key], dtype=np.float64)
        lines.append(
            f"aggregate metric={key} mean={_fmt(vals.mean())} "
            f"std={_fmt(vals.std())} n={len(vals)}"
        )
        # self-check: aggregates must match a recomputation from the lines
        recomputed = [
            float(ln.rsplit("value=", 1)[1])
            for ln in lines
            if ln.startswith("sample") and f"metric={key} " in ln
        ]
        if abs(np.mean(recomputed) - vals.mean()) > 1e-6:
            raise CliError(f"self-check failed: aggregate for {key} inconsistent")
    text = "\n".join(lines) + "\n"
    if args.out:
        check_fresh(args.out, args.force, "file")
        Path(args.out).write_text(text)
        print(f"wrote {len(lines)} metric lines to {args.out}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# codes


def write_pgm(path, image):
    """8-bit binary PGM of a 2-D array (label maps scaled to full range)."""
    arr = np.asarray(image, dtype=np.float64)
    span = arr.max() - arr.min()
    scaled = ((arr - arr.min()) / (span if span else 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{scaled.shape[1]} {scaled.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


def _codes_from(args, nets, dataset, samples):
    if args.source == "predictor":
        if "predictor" not in nets:
            raise CliError("checkpoint has no predictor network; use a tl checkpoint")
        return L.extract_codes(nets["predictor"], [s.hr for s in samples])
    return L.extract_codes(nets["encoder"], [s.labels for s in samples])


def cmd_codes(args):
    args = apply_defaults(args, dict(split="train", seed=0, source="encoder",
                                     dim=0, steps=9, features="codes"))
    kind, ck_args, nets = M.load_checkpoint(args.checkpoint)
    if kind not in ("autoencoder", "tl"):
        raise CliError(f"codes commands need an autoencoder/tl checkpoint, got {kind!r}")
    dataset = P.load_dataset(args.data)
    samples = dataset.split(args.split) or dataset.samples

    if args.action == "extract":
        codes = _codes_from(args, nets, dataset, samples)
        check_fresh(args.out, args.force, "file")
        write_ten(args.out, codes.values)
        print(f"wrote {codes.values.shape[0]}x{codes.values.shape[1]} codes to {args.out}")
        return 0

    if args.action == "traverse":
        codes = _codes_from(args, nets, dataset, samples)
        maps, sweep = L.latent_traversal(nets["decoder"], codes, args.dim, args.steps)
        out = Path(args.out)
        if out.exists():
            check_fresh(out, args.force, "dir")
        out.mkdir(parents=True, exist_ok=True)
        mid = maps[0].shape[0] // 2
        for i, lab in enumerate(maps):
            write_pgm(out / f"traverse_dim{args.dim}_step{i:02d}.pgm", lab[mid])
        write_ten(out / f"traverse_dim{args.dim}_codes.ten", sweep)
        print(f"wrote {len(maps)} label-map slices for dimension {args.dim} to {out}")
        return 0

    if args.action == "classify":
        train = dataset.split("train")
        test = dataset.split("test")
        if not train or not test:
            raise CliError("classify needs train and test splits with regimes")
        regimes = sorted({s.regime for s in train})
        if len(regimes) < 2:
            raise CliError("classify needs a two-regime (pathology) dataset")
        label_of = {r: i for i, r in enumerate(regimes)}
        y_train = [label_of[s.regime] for s in train]
        y_test = [label_of[s.regime] for s in test]
        if args.features == "pca":
            model = L.pca_fit([s.labels for s in train], downsample=2)
            x_train = np.stack([L.pca_project(model, s.labels) for s in train])
            x_test = np.stack([L.pca_project(model, s.labels) for s in test])
        else:
            x_train = _codes_from(args, nets, dataset, train).values
            x_test = _codes_from(args, nets, dataset, test).values
        pred, acc = L.classify_codes(x_train, y_train, x_test, y_test, seed=args.seed)
        print(f"features={args.features} train_n={len(train)} test_n={len(test)} "
              f"accuracy={acc!r}")
        return 0

    raise CliError(f"unknown codes action {args.action!r}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="acnn",
        description="Shape-regularised segmentation/super-resolution on "
                    "synthetic cardiac phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom dataset")
    g.add_argument("--n", type=int, required=True, help="training sample count")
    g.add_argument("--n-val", type=int, dest="n_val")
    g.add_argument("--n-test", type=int, dest="n_test")
    g.add_argument("--grid", help="HR grid as x,y,z (default 24,24,12)")
    g.add_argument("--k", type=int, help="through-plane decimation factor")
    g.add_argument("--sigma-mm", type=float, dest="sigma_mm")
    g.add_argument("--motion", type=float, help="max per-slice shift in voxels")
    g.add_argument("--pathology", action="store_const", const=1,
                   help="two-regime wall-thickness population")
    g.add_argument("--phases", type=int, choices=(1, 2))
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("stage", choices=("ae", "predictor", "tl", "seg", "sr"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ae", help="autoencoder checkpoint (predictor/tl/seg stages)")
    t.add_argument("--predictor", help="predictor checkpoint (tl/sr stages)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--baseline", action="store_true", help="force lambda1 = 0")
    t.add_argument("--multiplier", type=float, help="width multiplier")
    t.add_argument("--noise-std", type=float, dest="noise_std")
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.add_argument("--config")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("codes", help="latent-space analysis")
    c.add_argument("action", choices=("extract", "traverse", "classify"))
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split")
    c.add_argument("--source", choices=("encoder", "predictor"))
    c.add_argument("--out")
    c.add_argument("--dim", type=int)
    c.add_argument("--steps", type=int)
    c.add_argument("--features", choices=("codes", "pca"))
    c.add_argument("--seed", type=int)
    c.add_argument("--config")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_codes)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = merge_config(args)
        if args.command == "gen-data" and args.n < 1:
            parser.error("--n must be >= 1")
        if args.command == "codes" and args.action in ("extract", "traverse"):
            if not args.out:
                parser.error(f"codes {args.action} requires --out")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, E.ShapeError, M.SpecError,
            T.DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
