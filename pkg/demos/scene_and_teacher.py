"""Walk through one synthetic scene: bands, reference masks and the NDWI teacher.

Run with ``python demos/scene_and_teacher.py``. Prints numbers only.
"""
import numpy as np

from aqua.metrics import confusion, metrics
from aqua.synth import SceneSpec, generate_scene
from aqua.teacher import ndwi, teacher_mask

scene = generate_scene(SceneSpec(seed=7, water_cover_target=0.3, vegetated_water_fraction=0.2))
print("optical bands:", scene.optical.band_names, scene.optical.shape)
print("truth cover: %.3f" % scene.truth.values.mean())
print("vegetated share of water: %.3f" % (scene.vegetated.values.sum() / scene.truth.values.sum()))

# SAR is in dB; both kinds of water are dark, only the optical bands tell them apart
sar = scene.sar.data[0]
for name, m in (("open water", scene.open_truth.values), ("vegetated", scene.vegetated.values)):
    print("%-11s SAR mean %.1f dB" % (name, sar[m.astype(bool)].mean()))
print("land        SAR mean %.1f dB" % sar[scene.truth.values == 0].mean())

index = ndwi(scene.optical)
print("NDWI range: [%.2f, %.2f]" % (index.data[0].min(), index.data[0].max()))

mask = teacher_mask(scene.optical)
for ref in ("truth", "open_truth"):
    r = metrics(confusion(mask, getattr(scene, ref)))
    print("teacher vs %-10s IoU %.3f  recall %.3f" % (ref, r.iou, r.recall))

veg = scene.vegetated.values.astype(bool)
print("teacher recall on vegetated water: %.3f" % mask.values[veg].mean())
