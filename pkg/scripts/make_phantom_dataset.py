#!/usr/bin/env python3
"""Generate a synthetic phantom dataset as NIfTI pairs for pipeline demos.

Writes <out>/images/case-XXX.nii.gz and <out>/labels/case-XXX.nii.gz.
"""

import argparse
from pathlib import Path

import numpy as np

from subseg.labels import LabelTable
from subseg.phantom import make_phantoms
from subseg.volume import save_volume


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--count", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    table = LabelTable.default()
    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    for i, phantom in enumerate(make_phantoms(args.count, seed=args.seed, table=table)):
        name = f"case-{i:03d}.nii.gz"
        save_volume(out / "images" / name, phantom.intensity, dtype=np.float32)
        save_volume(out / "labels" / name, phantom.labels)
        print(f"wrote {name} (seed {phantom.seed})")


if __name__ == "__main__":
    main()
