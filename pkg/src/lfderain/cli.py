"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``derain``, ``eval``, ``ablate`` and
``gp-check``.  Exit status is 0 on success, 2 for numeric failures and 1
for every other library error (contract, format, shape, IO).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .errors import LfDerainError, NumericError
from .gp import GpConfig, gp_posterior, gp_variances
from .oracles import dense_inverse_gp
from .pipeline import RunConfig, cmd_ablate, cmd_derain, cmd_eval, cmd_synth, cmd_train


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    cfg.validate()
    return cfg


def gp_check(instances: int = 100, seed: int = 0) -> tuple[float, float]:
    """Largest deviation of the Cholesky GP from the dense-inverse oracle.

    Returns ``(max mean deviation, max variance deviation)`` over random
    instances with feature length and bank sizes up to 16.
    """
    rng = np.random.default_rng(seed)
    dm = dv = 0.0
    for _ in range(instances):
        d = int(rng.integers(1, 17))
        nn, nf = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        cfg = GpConfig(sigma_eps=float(rng.uniform(0.05, 1.0)), n_near=nn, n_far=nf)
        f = rng.normal(size=d)
        Fn, Ff = rng.normal(size=(nn, d)), rng.normal(size=(nf, d))
        mean_o, vn_o, vf_o = dense_inverse_gp(f, Fn, Ff, cfg.sigma_eps)
        vn, vf = gp_variances(f, Fn, Ff, cfg, clamp=False)
        dm = max(dm, float(np.max(np.abs(gp_posterior(f, Fn, cfg) - mean_o))))
        dv = max(dv, abs(vn - vn_o), abs(vf - vf_o))
    return dm, dv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfderain", description="Light-field rain removal pipeline")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--seed", type=int, help="override the master seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate rainy/clean scene bundles")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--out", required=True)
    s.add_argument("--real", action="store_true", help="write rainy inputs only (no ground truth)")

    t = sub.add_parser("train", help="staged training with checkpoints and a loss log")
    t.add_argument("--data", help="synthetic scene directory")
    t.add_argument("--real-data", help="scenes without ground truth for stage 2")
    t.add_argument("--checkpoints", help="checkpoint directory")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (resume later)")
    t.add_argument("--stage", choices=("dernet", "stage1", "stage2", "joint"),
                   help="run only this stage")

    d = sub.add_parser("derain", help="restore one scene with trained checkpoints")
    d.add_argument("--checkpoints", required=True)
    d.add_argument("--scene", required=True, help="scene directory (or a view directory)")
    d.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="PSNR/SSIM between output and reference directories")
    e.add_argument("--pair", nargs=2, action="append", metavar=("OUTPUT", "REFERENCE"), default=[])
    e.add_argument("--csv", help="write metrics here")

    a = sub.add_parser("ablate", help="train and score each ablation setting")
    a.add_argument("--data")
    a.add_argument("--eval-data")
    a.add_argument("--real-data")
    a.add_argument("--work", required=True)

    g = sub.add_parser("gp-check", help="compare the GP against the dense-inverse oracle")
    g.add_argument("--instances", type=int, default=100)
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    if args.command == "synth":
        dirs = cmd_synth(cfg, args.count, args.out, real=args.real)
        print(f"wrote {len(dirs)} scenes to {args.out}")
    elif args.command == "train":
        res = cmd_train(cfg, args.data, args.checkpoints, args.real_data, args.max_steps, args.stage)
        status = "finished" if res.finished else "paused"
        print(f"{status}: ran {res.steps_run} steps; completed stages: {', '.join(res.completed) or '-'}")
    elif args.command == "derain":
        cmd_derain(cfg, args.checkpoints, args.scene, args.out)
        print(f"wrote derained, rain, depth and fog views to {args.out}")
    elif args.command == "eval":
        rows = cmd_eval([tuple(p) for p in args.pair], args.csv)
        m = rows[-1]
        print(f"mean PSNR {m['psnr_db']:.4f} dB, mean SSIM {m['ssim']:.5f} over {len(args.pair)} scene(s)")
    elif args.command == "ablate":
        rows = cmd_ablate(cfg, args.work, args.data, args.eval_data, args.real_data)
        for r in rows:
            print(f"{r['ablation']}={r['value']}: PSNR {r['psnr_db']:.4f} dB, SSIM {r['ssim']:.5f}")
    elif args.command == "gp-check":
        dm, dv = gp_check(args.instances, cfg.run.seed)
        print(f"max |mean - oracle| = {dm:.3e}")
        print(f"max |variance - oracle| = {dv:.3e}")
        if max(dm, dv) > 1e-8:
            raise NumericError(f"GP deviates from the oracle by {max(dm, dv):.3e}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (LfDerainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
