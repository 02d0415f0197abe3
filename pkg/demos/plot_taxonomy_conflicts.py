"""
Three label sets over one world
===============================

Every toy dataset draws from the same generator of shapes on a sky/ground
backdrop, then relabels what it sees. toyA calls every circle ``circle``.
toyB splits circles by area into ``small-circle`` and ``large-circle``. toyC
renames squares to ``box`` and leaves triangles unlabelled.

A one-hot label space cannot hold all three at once. Here we look at the same
scenes through each dataset's eyes.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from langseg.data import default_toy_datasets, generate_scene, project_labels
from langseg.inference import semantic_target

datasets = default_toy_datasets()
for d in datasets:
    print(d.taxonomy.dataset_id, list(d.taxonomy.class_names))

###############################################################################
# One generated scene, three projections. Void pixels (the dropped
# triangles in toyC) show up as -1.

scenes = [generate_scene(seed) for seed in (3, 11, 19)]
fig, axes = plt.subplots(len(scenes), 1 + len(datasets), figsize=(10, 7))
for row, scene in zip(axes, scenes):
    row[0].imshow(scene.image.transpose(1, 2, 0))
    row[0].set_title("image", fontsize=8)
    for ax, d in zip(row[1:], datasets):
        s = project_labels(scene, d.projection, d.taxonomy)
        labels = semantic_target(s.labels, s.masks)
        ax.imshow(labels, cmap="tab10", vmin=-1, vmax=8, interpolation="nearest")
        present = sorted({d.taxonomy.class_names[i] for i in np.unique(labels) if i >= 0})
        ax.set_title(f"{d.taxonomy.dataset_id}: " + ", ".join(present), fontsize=6)
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()
fig.savefig("taxonomy_conflicts.png", dpi=110)

###############################################################################
# How often does each conflict show up? Count circle sizes across a few
# hundred scenes; toyB's threshold sits in the gap between the two radius
# bands, so the split is unambiguous from pixels alone.

areas = [inst.area for seed in range(300) for inst in generate_scene(seed).instances
         if inst.base_class == "circle"]
threshold = np.pi * 10.5 ** 2
print(f"{len(areas)} circles, {np.mean(np.array(areas) > threshold):.2f} of them large "
      f"(area threshold {threshold:.0f} px)")
