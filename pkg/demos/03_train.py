# coding: utf-8

# # Training one prior for several tasks
#
# A small mixed set of denoising and deblurring patches is enough to see
# the greedy-then-refine schedule at work. The model is written to
# demo_model.bin for the next script.

import os
import sys

import numpy as np
import skimage.data

from hqsrestore import TrainConfig, model_store, train_progressive
from hqsrestore.image_io import load_image
from hqsrestore.synthesis import ClassSpec, make_training_set

root = os.path.dirname(skimage.data.__file__)
images = [load_image(os.path.join(root, n)) for n in ("camera.png", "astronaut.png", "coffee.png")]

classes = [
    ClassSpec("denoise", 15, 12),
    ClassSpec("denoise", 25, 12),
    ClassSpec("deconv", 3, 8, psf_size=9),
]
data = make_training_set(images, classes, 40, seed=0)
print(f"{len(data)} training patches in {len({s.task.class_id for s in data})} classes")

# Quick settings: two greedy stages, one refinement to T=2.
cfg = TrainConfig(T_final=2, n_stages=2, n_filters=8, filter_size=3, greedy_iters=15, refine_iters=10)
model = train_progressive(data, cfg, on_checkpoint=lambda tag, m: print("finished", tag))

for phase in model.metadata["phases"]:
    print(f"{phase['tag']:10s} loss {phase['loss_start']:8.3f} -> {phase['loss_end']:8.3f}")
print("fidelity weights:", {k: round(v, 4) for k, v in model.lambdas.items()})

out = sys.argv[1] if len(sys.argv) > 1 else "demo_model.bin"
model_store.save(model, out)
print("saved", out)
