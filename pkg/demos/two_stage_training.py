"""Two-stage training at toy scale, then streaming inference.

    python demos/two_stage_training.py [--reference]

Stage 1 pretrains the convolutions with a translation head and a 112-way
rotation classifier on shuffled scan pairs.  Stage 2 trains the full
recurrent network on 8-frame windows, starting from those convolutions.
By default a narrow network is used so the script finishes in seconds;
``--reference`` switches to the full-size network (slow).
"""

import argparse
import math

import numpy as np

from laserodom.model import CnnConfig, ModelConfig, RnnConfig
from laserodom.odometry import run_cnn_inference, run_inference
from laserodom.synth import TrajectorySpec, generate_sequence, generate_world
from laserodom.training import LossConfig, Stage, TrainConfig, train_cnn, train_rcnn

ap = argparse.ArgumentParser()
ap.add_argument("--reference", action="store_true", help="train the full-size network")
args = ap.parse_args()

if args.reference:
    model, strict = ModelConfig(), True
else:
    narrow = ((3, 1, 8), (3, 2, 8), (3, 1, 8), (3, 2, 8), (3, 1, 8), (3, 2, 8))
    model, strict = ModelConfig(cnn=CnnConfig(layers=narrow), rnn=RnnConfig(hidden_size=64)), False

traj = TrajectorySpec.circle(120, 20.0, 0.5, center=(30.0, 30.0))
path = np.array([[p.x, p.y] for p in traj.poses()])
seq = generate_sequence(generate_world(7, keep_clear=path), traj, seed=7, seq_id="circle")
print(f"training on {len(seq) - 1} pairs; every label is (0.5 m, {math.degrees(0.5 / 20):.3f} deg)")

cnn, hist = train_cnn([seq], LossConfig(stage=Stage.CNN_CLASSIFICATION), TrainConfig(lr=1e-3, epochs=15),
                      model, strict=strict)
print(f"stage 1: loss {hist[-1]['loss']:.4f}, rotation class accuracy {hist[-1]['accuracy']:.3f}")

rcnn, hist = train_rcnn([seq], cnn, None, TrainConfig(lr=1e-3, epochs=15, window=8, windows_per_batch=2))
print(f"stage 2: |dd| {hist[-1]['mean_abs_err_d']:.4f} m, "
      f"|dtheta| {math.degrees(hist[-1]['mean_abs_err_theta']):.4f} deg (windowed, training mode)")

labels = seq.label_array()
for name, (traj_est, deltas, timing) in (("CNN only", run_cnn_inference(seq, cnn)),
                                         ("RCNN", run_inference(seq, rcnn))):
    err = np.abs(np.array([[d.delta_d, d.delta_theta] for d in deltas]) - labels)
    end = traj_est.poses[-1]
    print(f"{name:>8}: |dd| {err[:, 0].mean():.4f} m, |dtheta| {np.degrees(err[:, 1]).mean():.4f} deg, "
          f"end point ({end.x:.2f}, {end.y:.2f}), {timing.mean * 1000:.1f} ms/frame")
