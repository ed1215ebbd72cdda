"""Distil the NDWI teacher into a small SAR U-Net on a handful of scenes.

Small enough for a laptop CPU (seconds). The full benchmark lives
behind the CLI, see the README.
"""
from dataclasses import replace

from aqua.metrics import aggregate_weighted, confusion, metrics
from aqua.raster import normalize_sar, split_dataset, tile_scene
from aqua.synth import SceneSpec, generate_scene
from aqua.train import TrainConfig, filter_training_pairs, train
from aqua.unet import UNetConfig, binarize, forward


def tiles(seeds, split):
    out = []
    for s in seeds:
        sc = generate_scene(SceneSpec(seed=s, width=128, height=128, vegetated_water_fraction=0.2))
        masks = {"truth": sc.truth, "vegetated": sc.vegetated}
        out += tile_scene(sc.optical, normalize_sar(sc.sar), 32, prefix="s%02d" % s, masks=masks)
    if split == "test":
        return [replace(p, split="test") for p in out]
    return split_dataset(filter_training_pairs(out), 0.8, seed=0)

pool = tiles(range(12), "train")
test = tiles(range(100, 104), "test")
print("train/val/test tiles:", sum(p.split == "train" for p in pool), sum(p.split == "val" for p in pool), len(test))

net = UNetConfig(depth=2, base_channels=4, tile_size=32)
report, model = train(pool, net, TrainConfig(learning_rate=1e-3, batch_size=8, epochs=10))
for i, (a, b) in enumerate(zip(report.train_loss, report.val_loss), 1):
    print("epoch %d  train %.3f  val %.3f" % (i, a, b))

rows, veg_hits, veg_total = [], 0, 0
for p in test:
    pred = binarize(forward(model, p.sar))
    rows.append(metrics(confusion(pred, p.masks["truth"])))
    v = p.masks["vegetated"].values.astype(bool)
    veg_hits += int(pred.values[v].sum())
    veg_total += int(v.sum())
total = aggregate_weighted(rows)
print("student IoU %.3f  vegetated recall %.3f" % (total.iou, veg_hits / max(veg_total, 1)))
