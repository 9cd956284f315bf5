"""
Training the shape tokenizer
============================

Stage 1 fits occupancy (BCE) with the VQ bottleneck and the self-distillation
regularizer. Stage 2 warm-starts from it, adds a TSDF head and trains with
L1 + Eikonal + REPA. The run below is short so it finishes in a few
minutes; raise STEPS for a proper fit (see criterion 2 in the tests).
"""
import sys
import warnings

from shapetok.geom import random_shape
from shapetok.net import NetConfig
from shapetok.train import TrainConfig, evaluate_shape, fit, with_stage

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 300
warnings.filterwarnings("ignore", "sinkhorn")

shape = random_shape("union", 0)
cfg = NetConfig(n_points=512)
tc = TrainConfig(steps=STEPS, n_uniform=512, n_near=512, seed=0)


def show(model, rec):
    if (rec.step + 1) % 50 == 0:
        parts = ", ".join(f"{k}={v:.4f}" for k, v in rec.parts.items())
        print(f"step {rec.step + 1:5d} [{rec.path:8s}] {parts}")


model = fit([shape], tc, cfg, callback=show).model
for path, m in evaluate_shape(model, shape, n=20_000).items():
    print(f"stage 1 {path:8s}: V-IoU {m['v_iou']:.3f}  S-IoU {m['s_iou']:.3f}")

# The tsdf head starts at zero and catches up within a few hundred steps.
# Stage 2 no longer trains the occupancy head, so it drifts as the shared
# trunk moves.
model = fit([shape], with_stage(tc, "tsdf"), model=model, callback=show).model
for head in ("occ", "tsdf"):
    for path, m in evaluate_shape(model, shape, n=20_000, head=head).items():
        print(f"stage 2 {head:4s} {path:8s}: V-IoU {m['v_iou']:.3f}  S-IoU {m['s_iou']:.3f}")

print("tokens:", model.tokenize(shape).indices.tolist())
