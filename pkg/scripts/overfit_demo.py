#!/usr/bin/env python3
"""Desk-scale overfit run: memorize a single phantom patch and report the loss curve.

Uses the compact phantom layout so every class appears in the one 96^3 patch.
"""

import argparse
import json

import numpy as np
import torch

from subseg.labels import LabelTable
from subseg.model import HybridSegNet3d, ModelConfig
from subseg.phantom import make_phantom
from subseg.training import TrainConfig, prepare_case, train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--stop-loss", type=float, default=0.045)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    table = LabelTable.default()
    phantom = make_phantom(args.seed, table, layout=(4, 4, 2))
    case = prepare_case(phantom.intensity, phantom.labels, table, case_id="overfit")
    assert case.plan.crop_dims == (96, 96, 96), "compact phantom should crop to one patch"

    cfg = TrainConfig(learning_rate=args.lr, batch_size=1, max_steps=args.steps,
                      val_interval=max(args.steps, 1), augment_prob=0.0,
                      stop_loss=args.stop_loss, seed=args.seed)
    torch.manual_seed(cfg.seed)
    model = HybridSegNet3d(ModelConfig.reduced())
    result = train(model, [case], [], cfg, args.out_dir, table=table)

    print(f"steps run: {result.steps}, final loss: {result.final_loss:.4f}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(case.intensity)[None, None]
        pred = model(x)[0].argmax(dim=0).numpy()
    target = case.class_labels
    scores = []
    for c in np.unique(target):
        a, b = pred == c, target == c
        scores.append(2.0 * (a & b).sum() / (a.sum() + b.sum()))
    print(f"argmax mean DSC vs target: {np.mean(scores):.4f}")
    print(f"loss log: {result.log_path}")
    for line in result.log_path.read_text().splitlines()[-5:]:
        entry = json.loads(line)
        print(f"  step {entry['step']}: loss {entry['loss']:.4f}")


if __name__ == "__main__":
    main()
