#!/usr/bin/env python3
"""End-to-end smoke test of the tokenguide_py extension module.

Build the extension first:

    cargo build -p tokenguide-py --release

then run:

    python3 python/smoke_test.py
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "libtokenguide_py.so",
        REPO / "target" / "debug" / "libtokenguide_py.so",
        REPO / "target" / "release" / "tokenguide_py.dll",
        REPO / "target" / "debug" / "tokenguide_py.dll",
        REPO / "target" / "release" / "libtokenguide_py.dylib",
        REPO / "target" / "debug" / "libtokenguide_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("extension not built; run: cargo build -p tokenguide-py --release")
    stage = Path(tempfile.mkdtemp(prefix="tokenguide_py_"))
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    shutil.copy2(built, stage / f"tokenguide_py{suffix}")
    sys.path.insert(0, str(stage))
    import tokenguide_py

    return tokenguide_py


def main():
    tg = load_module()
    print(f"tokenguide_py {tg.version()}")

    work = Path(tempfile.mkdtemp(prefix="tokenguide_smoke_"))
    train_path = str(work / "train.gds")
    val_path = str(work / "val.gds")

    n = tg.generate_dataset(train_path, n=16, size=32, seed=7)
    assert n == 16
    assert tg.dataset_len(train_path) == 16
    tg.generate_dataset(val_path, n=6, size=32, seed=8)

    image, mask = tg.load_sample(train_path, 0)
    assert len(image) == 32 and len(image[0]) == 32
    flat = [v for row in image for v in row]
    assert all(0.0 <= v <= 1.0 for v in flat), "image values must lie in [0,1]"
    ones = sum(v for row in mask for v in row)
    assert 0 < ones < 32 * 32, "mask should be a nonempty blob"

    # metrics round trip through python lists
    iou, dsc = tg.overlap(mask, mask)
    assert iou == 1.0 and dsc == 1.0
    assert tg.hd95(mask, mask) == 0.0

    # a couple of gradient-check rows
    rows = tg.gradcheck(full=False)
    assert all(rel <= 1e-4 for (_, rel, _) in rows), rows
    print(f"gradcheck: {len(rows)} ops ok")

    # tiny guided training run (small dims keep this quick)
    ckpt = str(work / "smoke.gck")
    best_dsc, best_epoch = tg.train(
        train_path, val_path, "guided", ckpt,
        epochs=2, seed=1, dim=16, enc_depth=1, heads=2,
        base_channels=4, unet_depth=2, book_k=4,
    )
    print(f"train: best val DSC {best_dsc:.3f} at epoch {best_epoch}")
    assert 0.0 <= best_dsc <= 1.0

    report = json.loads(tg.evaluate(ckpt, val_path))
    assert report["n_samples"] == 6
    assert 0.0 <= report["dsc_mean"] <= 1.0
    print(f"evaluate: DSC {report['dsc_mean']:.3f} IoU {report['iou_mean']:.3f} "
          f"HD95 {report['hd95_mean']:.2f}")

    guide = tg.guide_mask(ckpt, val_path, 0)
    assert len(guide) == 32 and len(guide[0]) == 32
    gflat = [v for row in guide for v in row]
    assert all(0.0 < v < 1.0 for v in gflat), "guide must stay strictly inside (0,1)"

    pred = tg.predict_mask(ckpt, val_path, 0, tta=True)
    assert set(v for row in pred for v in row) <= {0, 1}

    print("smoke test OK")


if __name__ == "__main__":
    main()
