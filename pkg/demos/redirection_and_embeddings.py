"""
Asking one model for different label sets
=========================================

A trained checkpoint knows every registered dataset's class names. The same
image can be segmented in toyA's vocabulary or in toyB's simply by swapping
the text table the model queries with. The script goes end to end with the
command-line tools, on a short run so it finishes in a few minutes::

    python demos/redirection_and_embeddings.py /tmp/langseg-demo
"""

import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from langseg.cli import main
from langseg.inference import semantic_inference
from langseg.training import load_checkpoint
from langseg.data import read_dataset

work = Path(sys.argv[1] if len(sys.argv) > 1 else "langseg-demo")
work.mkdir(exist_ok=True)
common = ["--set", f"data.root={work / 'data'}", "--set", f"checkpoint={work / 'model.ckpt'}",
          "--set", f"loss_log={work / 'loss_log.jsonl'}", "--set", f"report_dir={work / 'reports'}",
          "--set", "data.n_train=200", "--set", "data.n_val=20", "--set", "optim.iterations=600"]

###############################################################################
# Generate data, train, evaluate every dataset from one checkpoint.

main(["generate-data", "--force"] + common)
main(["train", "-v"] + common)
main(["eval", "--checkpoint", str(work / "model.ckpt")])

###############################################################################
# Segment toyA validation images under both toyA and toyB.

model, cfg, registry = load_checkpoint(work / "model.ckpt")
_, splits, _ = read_dataset(work / "data" / "toyA")
images = torch.from_numpy(np.stack([s.image for s in splits["val"][:4]]))
fig, axes = plt.subplots(len(images), 3, figsize=(7, 9))
for ds, col in (("toyA", 1), ("toyB", 2)):
    tax = registry[ds]
    pred = model.predict(images, tax)
    for k in range(len(images)):
        labels = semantic_inference(pred.logits[k], pred.masks[k], tax)
        axes[k, col].imshow(labels, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        names = sorted({tax.category_names[i] for i in np.unique(labels)})
        axes[k, col].set_title(f"{ds}: " + ", ".join(names), fontsize=6)
for k in range(len(images)):
    axes[k, 0].imshow(images[k].numpy().transpose(1, 2, 0))
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()
fig.savefig(work / "redirection.png", dpi=110)

###############################################################################
# Class embeddings of all datasets in one plane. Names shared between datasets
# land on the same point; ``box`` and ``square`` do not, which is the naming
# failure the renamed dataset is there to expose.

main(["embed-viz", "--checkpoint", str(work / "model.ckpt"), "--out-png", str(work / "embeddings.png"),
      "--out-csv", str(work / "embeddings.csv")])
main(["export-embeddings", "--checkpoint", str(work / "model.ckpt"), "--out", str(work / "embeddings.npz")])
print("outputs in", work)
