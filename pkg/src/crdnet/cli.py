"""Command-line entry point: ``crdnet {synth,gt,train,eval,infer,ablate}``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from .config import ExperimentConfig, set_path
from .model import CRDNet
from .train import (
    EvalResult,
    Sample,
    TrainingDiverged,
    count,
    evaluate,
    evaluate_counts,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

log = logging.getLogger("crdnet")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset on disk


def write_dataset(out: Path, cfg: dp.SynthConfig, n: int) -> dict:
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(n):
        image, ann = dp.generate_scene(cfg, i)
        name = f"img_{i:05d}"
        dp.write_image(out / "images" / f"{name}.png", image)
        dp.write_annotation(out / "annotations" / f"{name}.json", ann)
        items.append({"name": name, "image": f"images/{name}.png", "annotation": f"annotations/{name}.json", "count": ann.count})
    manifest = {"version": 1, "synth": cfg.__dict__.copy(), "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_dataset(root, sigma: float) -> list:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CommandError(f"{root}: no manifest.json (run `crdnet synth` first)")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    samples = []
    for item in manifest["items"]:
        ann = dp.load_annotation(root / item["annotation"])
        image = dp.read_image(root / item["image"])
        if image.shape != (ann.height, ann.width):
            raise CommandError(f"{item['image']}: size {image.shape} does not match annotation {ann.height}x{ann.width}")
        samples.append(Sample(image, dp.generate_density_map(ann, sigma), float(ann.count), item["name"]))
    return samples


def split_indices(n: int, test_fraction: float, seed: int) -> dict:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    return {"train": sorted(perm[n_test:].tolist()), "test": sorted(perm[:n_test].tolist())}


# ---------------------------------------------------------------------------
# config handling


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not _:
            raise CommandError(f"--set expects key=value, got {item!r}")
        set_path(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    return cfg


def _build_model(cfg: ExperimentConfig) -> CRDNet:
    return CRDNet(cfg.backbone, cfg.decoder, seed=cfg.seed, dtype=np.dtype(cfg.train.dtype))


def _meta(cfg: ExperimentConfig) -> dict:
    # run locations stay out of the checkpoint so identical runs give identical bytes
    config = {k: v for k, v in cfg.to_dict().items() if k not in ("data_dir", "out_dir")}
    return {"density_scale": cfg.train.density_scale, "gt_sigma": cfg.train.gt_sigma, "config": config}


def _write_pretrain_log(path: Path, history: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "epoch", "loss"])
        for stage, losses in history.items():
            for e, v in enumerate(losses):
                w.writerow([stage, e, repr(v)])


def _train_run(cfg: ExperimentConfig, out: Path) -> tuple:
    samples = load_dataset(cfg.data_dir, cfg.train.gt_sigma)
    if len(samples) < 2:
        raise CommandError("need at least 2 images to train")
    split = split_indices(len(samples), cfg.test_fraction, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "split.json").write_text(json.dumps(split) + "\n", encoding="utf-8")
    train = [samples[i] for i in split["train"]]
    test = [samples[i] for i in split["test"]]
    model = _build_model(cfg)
    history = pretrain(model, train, cfg.train)
    _write_pretrain_log(out / "pretrain.csv", history)
    return model, train, test, split


def _finetune_arm(model: CRDNet, cfg: ExperimentConfig, train: list, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    finetune(model, train, cfg.train, metrics_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints")
    save_checkpoint(out / "model.ckpt", model, _meta(cfg))


def _format_metrics(r: EvalResult) -> str:
    return f"MAE={r.mae:.6f} MSE={r.mse:.6f}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    synth = copy.deepcopy(cfg.synth)
    synth.seed = cfg.seed
    n = 200 if args.count is None else args.count
    if n < 0:
        raise CommandError("--count must be >= 0")
    out = Path(args.out or cfg.data_dir)
    write_dataset(out, synth, n)
    print(f"wrote {n} scenes to {out}")
    return 0


def cmd_gt(args) -> int:
    src = Path(args.annotations)
    out = Path(args.out)
    if not src.is_dir():
        raise CommandError(f"{src}: not a directory")
    out.mkdir(parents=True, exist_ok=True)
    worst = 0.0
    files = sorted(src.glob("*.json"))
    for path in files:
        try:
            ann = dp.load_annotation(path)
        except dp.FormatError as e:
            raise CommandError(f"malformed annotation {path.name}: {e}") from None
        dmap = dp.generate_density_map(ann, args.sigma)
        target = out / f"{path.stem}.crd"
        dp.write_density(target, dmap)
        err = abs(count(dp.read_density(target)) - ann.count)
        worst = max(worst, err)
        print(f"{path.stem} count={ann.count} sum={count(dmap):.6f} err={err:.2e}")
        if err >= 1e-3:
            raise CommandError(f"{path.name}: density sum off by {err:.3g}")
    print(f"wrote {len(files)} density maps to {out}; max |sum - count| = {worst:.2e}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    model, train, test, _ = _train_run(cfg, out)
    _finetune_arm(model, cfg, train, out)
    r = evaluate(model, test, density_scale=cfg.train.density_scale)
    print(f"test {_format_metrics(r)}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.predictions is None:
        raise CommandError("eval needs --checkpoint or --predictions")
    model, meta = (None, {})
    if args.checkpoint is not None:
        if not Path(args.checkpoint).exists():
            raise CommandError(f"{args.checkpoint}: checkpoint not found")
        model, meta = load_checkpoint(args.checkpoint)
    sigma = meta.get("gt_sigma", 4.0) if args.sigma is None else args.sigma
    samples = load_dataset(args.data, sigma)
    if args.split:
        split = json.loads(Path(args.split).read_text(encoding="utf-8"))
        samples = [samples[i] for i in split[args.subset]]
    if not samples:
        raise CommandError("no images to evaluate")
    gt_counts = [s.count for s in samples]
    if args.gt_maps is not None:
        gt_counts = [count(dp.read_density(Path(args.gt_maps) / f"{s.name}.crd")) for s in samples]
    if args.predictions is not None:
        pred_dir = Path(args.predictions)
        est = [count(dp.read_density(pred_dir / f"{s.name}.crd")) for s in samples]
        result = evaluate_counts(gt_counts, est)
    else:
        result = evaluate(model, samples, clamp=args.clamp, density_scale=meta.get("density_scale", 1.0))
        if args.gt_maps is not None:
            result = evaluate_counts(gt_counts, [nh for _, nh in result.pairs])
    for s, (n, nh) in zip(samples, result.pairs):
        print(f"{s.name} gt={n:.3f} est={nh:.3f}")
    if args.report:
        report = {"mae": result.mae, "mse": result.mse, "images": [{"name": s.name, "gt": n, "est": nh} for s, (n, nh) in zip(samples, result.pairs)]}
        Path(args.report).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(_format_metrics(result))
    return 0


def cmd_infer(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CommandError(f"{args.checkpoint}: checkpoint not found")
    model, meta = load_checkpoint(args.checkpoint)
    image = dp.read_image(args.image)
    dmap = model.predict(image) / meta.get("density_scale", 1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    dp.write_density(out / f"{stem}.crd", dmap)
    dp.export_png(out / f"{stem}.png", dmap)
    if args.levels:
        state = model.forward(np.asarray(image, dtype=model.dtype)[None, None])
        for j, (d, r) in enumerate(zip(state.densities[1:], state.residuals), start=1):
            dp.write_density(out / f"{stem}_D{j}.crd", d.data[0, 0])
            dp.write_density(out / f"{stem}_R{j}.crd", r.data[0, 0])
    print(f"count={count(dmap):.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    model, train, test, _ = _train_run(cfg, out)
    pretrained = model.state_dict()
    lam = cfg.train.loss.lam if cfg.train.loss.lam > 0 else 1e-4
    rows = []
    for label, arm_lam, sub in (("L_E", 0.0, "LE"), ("L_E+L_Y", lam, "LE_LY")):
        arm = copy.deepcopy(cfg)
        arm.train.loss.lam = arm_lam
        model.load_state_dict(pretrained)
        _finetune_arm(model, arm, train, out / sub)
        r = evaluate(model, test, density_scale=cfg.train.density_scale)
        rows.append((label, arm_lam, r))
        print(f"{label}: {_format_metrics(r)}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["loss", "lambda", "MAE", "MSE"])
        for label, arm_lam, r in rows:
            w.writerow([label, arm_lam, repr(r.mae), repr(r.mse)])
    base, ours = rows[0][2], rows[1][2]
    table = [
        "| Loss | MAE | MSE |",
        "|---|---|---|",
        *(f"| {label} | {r.mae:.4f} | {r.mse:.4f} |" for label, _, r in rows),
        "",
        f"signed MAE difference (L_E+L_Y minus L_E): {ours.mae - base.mae:+.4f} ({(ours.mae - base.mae) / base.mae:+.2%})",
    ]
    (out / "ablation.md").write_text("\n".join(table) + "\n", encoding="utf-8")
    print("\n".join(table))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crdnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.finetune_lr=1e-4")
        if data:
            sp.add_argument("--data", help="dataset directory with manifest.json")

    sp = sub.add_parser("synth", help="generate a synthetic dot-annotated dataset")
    common(sp, data=False)
    sp.add_argument("--count", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("gt", help="build ground-truth density maps from annotations")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--sigma", type=float, default=4.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gt)

    sp = sub.add_parser("train", help="staged pretraining then fine-tuning")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MAE/MSE of a checkpoint or of precomputed density maps")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", help="split.json written by train")
    sp.add_argument("--subset", default="test", choices=["train", "test"])
    sp.add_argument("--predictions", help="directory of <name>.crd maps used instead of the network")
    sp.add_argument("--gt-maps", help="directory of <name>.crd ground-truth maps; counts are their integrals")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--clamp", action="store_true", help="clip negative densities before counting")
    sp.add_argument("--report", help="write a JSON report here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="density map for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--levels", action="store_true", help="also write per-level D and R maps")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("ablate", help="paired runs with and without the local count loss")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, dp.FormatError, TrainingDiverged, OSError, ValueError, KeyError) as e:
        print(f"crdnet {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
