"""Sparse-IMU tracking on synthetic clips, start to finish.

Trains the desk-profile codec and fusion encoder, predicts codes for
held-out clips from three IMUs, then refines the latent against the IMU
streams. Prints MPJPE before and after refinement. About three minutes on
one core.

    python demos/track_sparse_imu.py [--setup LW+RW+H] [--clips 4]
"""

import argparse
import time

import numpy as np
import torch

from ego_omni.bench.metrics import jitter, mpjpe
from ego_omni.bench.synth import synth_dataset
from ego_omni.codec import CodecConfig, train_codec
from ego_omni.fusion import FusionConfig, code_accuracy, fuse, make_fusion_samples, select_codes, train_fusion
from ego_omni.imusim import mask_from_labels
from ego_omni.kinematics import Skeleton
from ego_omni.reprs import recover_positions
from ego_omni.tracker import EnergyConfig, track

p = argparse.ArgumentParser()
p.add_argument("--setup", default="LW+RW+H")
p.add_argument("--clips", type=int, default=4)
p.add_argument("--iters", type=int, default=200)
args = p.parse_args()

torch.set_num_threads(1)
sk = Skeleton()
train = make_fusion_samples(synth_dataset(256, seed=0), sk)
test = make_fusion_samples(synth_dataset(args.clips, seed=1), sk, seed=999)

t0 = time.time()
codec, hist = train_codec(np.stack([s.repr for s in train]), CodecConfig.desk())
fusion, _ = train_fusion(train, codec, cfg=FusionConfig.desk(n_code=codec.cfg.n_code))
print(f"trained codec + fusion in {time.time() - t0:.0f}s, recon loss {hist.epoch_losses[-1]['recon']:.3f}, "
      f"held-out code accuracy {code_accuracy(fusion, codec, test):.3f}")

mask = mask_from_labels(args.setup)
dec = codec.frozen_decoder()
cfg = EnergyConfig(max_iters=args.iters)
for s in test:
    inp = s.input(mask)
    init = select_codes(fuse(inp, fusion), codec.books.detach(), "argmax").features
    res = track(init, inp.imu, dec, sk, cfg, initial_root=s.initial_root)
    gt = recover_positions(s.repr, sk, s.initial_root)
    with torch.no_grad():
        before = recover_positions(dec.decode(init.double()[None])[0], sk, s.initial_root).numpy()
    print(f"{s.label:>10s}  fusion only {mpjpe(before, gt):6.1f} mm -> tracked {mpjpe(res.positions, gt):6.1f} mm  "
          f"jitter {jitter(res.positions, 30.0):.3f}  energy {res.energy_trace[0]:.3f} -> {res.energy_trace[-1]:.3f} "
          f"({res.iterations} its)")
