"""
Synthesize, train, derain, score
================================

The whole workflow on a toy configuration that finishes in seconds: two
synthetic scenes and one unlabelled "real" scene of 3x3 views at 16x16,
networks two channels wide, a handful of steps per training stage.  The
numbers it prints are not meaningful quality figures; the point is the
shape of the workflow and the files it leaves behind.
"""

import sys
import tempfile
from pathlib import Path

from lfderain.pipeline import RunConfig, cmd_derain, cmd_eval, cmd_synth, cmd_train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="lfderain_"))

cfg = RunConfig()
cfg.scene.angular, cfg.scene.height, cfg.scene.width = 3, 16, 16
n = cfg.network
n.detector = n.depth = n.restorer = n.discriminator = 2
n.dense_layers, n.depth_blocks, n.stages, n.dstb_blocks = 1, 1, 2, 1
s = cfg.schedule
s.dernet_steps, s.stage1_steps, s.stage2_steps, s.joint_steps = 20, 30, 10, 20
s.lr = 1e-3
cfg.bank.capacity = 16
cfg.gp.n_near = cfg.gp.n_far = 4
work.mkdir(parents=True, exist_ok=True)
cfg.save(work / "run.ini")

# %%
# Data: labelled synthetic scenes plus a real scene with only the rainy input.
cmd_synth(cfg, 2, work / "syn")
cmd_synth(cfg, 1, work / "real", real=True)

# %%
# Training runs depth, detector (supervised then unsupervised) and joint
# stages in order.  Stopping after a step budget and calling again resumes.
first = cmd_train(cfg, work / "syn", work / "ck", work / "real", max_steps=40)
print("after the first call:", first.completed, "finished:", first.finished)
rest = cmd_train(cfg, work / "syn", work / "ck", work / "real")
print("after resuming:", rest.completed, "finished:", rest.finished)
log = (work / "ck" / "loss_log.csv").read_text().splitlines()
print("loss log has", len(log) - 1, "rows; last:", log[-1])

# %%
# Inference writes restored views plus the rain, depth and fog estimates.
cmd_derain(cfg, work / "ck", work / "syn" / "scene_000", work / "out")
rows = cmd_eval([(work / "out" / "derained", work / "syn" / "scene_000" / "gt")])
base = cmd_eval([(work / "syn" / "scene_000" / "input", work / "syn" / "scene_000" / "gt")])
print("mean PSNR  input %.2f dB  restored %.2f dB" % (base[-1]["psnr_db"], rows[-1]["psnr_db"]))
print("outputs under", work)
