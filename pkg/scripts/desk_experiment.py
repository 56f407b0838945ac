"""Desk-scale experiment: synthetic data, staged training, evaluation, loss ablation.

    python scripts/desk_experiment.py --out runs/desk

Writes everything under --out and prints a short summary; the same numbers
end up in <out>/summary.json.
"""

import argparse
import json
import time
from pathlib import Path

from crdnet.cli import load_dataset, main
from crdnet.train import constant_predictor_mae

ROOT = Path(__file__).resolve().parents[1]


def step(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def run(config: Path, out: Path, skip_ablation: bool) -> dict:
    data = out / "data"
    timings = {}
    t = time.perf_counter()
    step("synth", "--config", config, "--out", data)
    step("train", "--config", config, "--data", data, "--out", out / "train")
    timings["synth_and_train_s"] = time.perf_counter() - t
    step("eval", "--checkpoint", out / "train" / "model.ckpt", "--data", data,
         "--split", out / "train" / "split.json", "--report", out / "train" / "eval.json")  # fmt: skip

    report = json.loads((out / "train" / "eval.json").read_text())
    split = json.loads((out / "train" / "split.json").read_text())
    cfg = json.loads((out / "train" / "config.json").read_text())
    samples = load_dataset(data, cfg["train"]["gt_sigma"])
    baseline = constant_predictor_mae([samples[i] for i in split["train"]], [samples[i] for i in split["test"]])
    summary = {
        "test_mae": report["mae"],
        "test_mse": report["mse"],
        "constant_predictor_mae": baseline,
        "relative_improvement": 1.0 - report["mae"] / baseline,
        **timings,
    }
    if not skip_ablation:
        t = time.perf_counter()
        step("ablate", "--config", config, "--data", data, "--out", out / "ablate")
        summary["ablate_s"] = time.perf_counter() - t
        summary["ablation_table"] = (out / "ablate" / "ablation.md").read_text()
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    p.add_argument("--out", type=Path, default=ROOT / "runs" / "desk")
    p.add_argument("--skip-ablation", action="store_true")
    args = p.parse_args()
    s = run(args.config, args.out, args.skip_ablation)
    print(f"\ntest MAE {s['test_mae']:.3f}  MSE {s['test_mse']:.3f}")
    print(f"constant predictor MAE {s['constant_predictor_mae']:.3f}  ({s['relative_improvement']:.0%} lower)")
