"""End-to-end acceptance checks at desk scale.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion.  The desk pipeline (4 scenes of 5x5 views at
64x64, width-4 networks) is trained once per module and shared.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_config, tiny_scene
from lfderain import tensor as T
from lfderain.conv import avg_pool_hw, conv3d, conv4d, upsample_hw
from lfderain.dernet import DepthConfig, DERNet
from lfderain.gp import FeatureBank, GpConfig, gp_posterior, gp_variances, posterior_variance
from lfderain.lightfield import LightField, PatchSpec, psnr
from lfderain.losses import smooth_l1
from lfderain.mgpdnet import (MGPDNet, NetConfig, PerceptualProxy, _patch_pair, make_banks,
                              supervised_loss, train_stage1, train_stage2)
from lfderain.nn import load_tensors, save_tensors
from lfderain.oracles import dense_inverse_gp, direct_conv4d
from lfderain.pipeline import (CheckpointStore, RunConfig, build_models, cmd_derain, cmd_eval,
                               cmd_synth, cmd_train, derain_lightfield, evaluate_scenes, load_scenes, load_trained)
from lfderain.rain_synth import (SceneData, Streak, SynthParams, compose, depth_to_fog,
                                 procedural_lightfield, rasterize_streaks, synth_scene)
from lfderain.rnnat import (RNNAT, Discriminator, RestoreConfig, derain_loss, gan_losses,
                            generator_loss)
from lfderain.tensor import Tensor, finite_diff_check, no_grad

criterion = pytest.mark.criterion


def _weighted(y):
    """Sum of ``y`` with distinct per-coordinate weights."""
    return T.sum_(T.mul(y, Tensor(np.cos(np.arange(y.size)).reshape(y.shape))))


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def desk_config(conv_mode="4d"):
    cfg = RunConfig()
    n = cfg.network
    n.detector = n.depth = n.restorer = n.discriminator = 4
    s = cfg.schedule
    s.dernet_steps, s.stage1_steps, s.joint_steps = 100, 300, 300
    cfg.ablation.conv_mode = conv_mode
    return cfg


# fixed evaluation patches for the stage-1 learning signal
EVAL_PATCHES = [PatchSpec(r, c, 8, 8) for r in (8, 40) for c in (12, 44)]


def _stage1_eval(model, scenes, phi):
    with no_grad():
        vals = []
        for sc in scenes:
            for p in EVAL_PATCHES:
                inp, tgt = _patch_pair(sc, p)
                vals.append(supervised_loss(model(inp).rain, tgt, phi).item())
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Train the 4d desk pipeline in phases so stage 1 can be timed and scored."""
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_config()
    cmd_synth(cfg, 4, root / "data")
    cmd_synth(replace(cfg, run=replace(cfg.run, seed=1)), 1, root / "held")
    scenes = load_scenes(root / "data")
    ck = root / "ck_4d"

    cmd_train(cfg, root / "data", ck, only="dernet")
    depth_sum = load_trained(cfg, ck).depth.checksum()

    models = build_models(cfg)
    before = _stage1_eval(models.detector, scenes, models.phi)
    t0 = time.perf_counter()
    cmd_train(cfg, root / "data", ck, only="stage1")
    stage1_seconds = time.perf_counter() - t0
    after = _stage1_eval(load_trained(cfg, ck).detector, scenes, models.phi)

    res = cmd_train(cfg, root / "data", ck)
    assert res.finished
    return dict(root=root, cfg=cfg, ck=ck, held=load_scenes(root / "held"), depth_sum=depth_sum,
                before=before, after=after, stage1_seconds=stage1_seconds)


@criterion(1)
def test_conv4d_matches_loop_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(50):
        n, d, h, w = rng.integers(1, 7, size=4)
        ci, co = rng.integers(1, 4, size=2)
        ext = tuple(int(2 * rng.integers(0, 3) + 1) for _ in range(4))
        x = rng.normal(size=(ci, n, d, h, w))  # [C, S, V, H, W]
        wt = rng.normal(size=(co, ci) + ext)
        b = rng.normal(size=co)
        np.testing.assert_allclose(conv4d(Tensor(x), Tensor(wt), Tensor(b)).data,
                                   direct_conv4d(x, wt, b), atol=1e-8, rtol=0)
    assert time.perf_counter() - t0 < 10.0


@criterion(2)
def test_gradients_of_primitives_and_networks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, size=(3, 4))
    x[np.abs(x) < 0.1] += 0.3
    x[np.abs(np.abs(x) - 1) < 0.1] += 0.25
    pos = rng.uniform(0.3, 2.0, size=(3, 4))
    other, row = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4))
    mat = Tensor(rng.normal(size=(4, 2)))
    unary = [
        (lambda t: T.add(t, row), x), (lambda t: T.sub(other, t), x), (lambda t: T.mul(t, t), x),
        (lambda t: T.div(other, t), pos), (T.neg, x), (lambda t: T.scale(t, -2.5), x),
        (T.relu, x), (lambda t: T.clamp(t, -1.0, 1.0), x), (T.exp, x), (T.log, pos),
        (T.sigmoid, x), (T.tanh, x), (T.softplus, x), (T.abs_, x), (T.square, x), (T.sqrt, pos),
        (lambda t: T.sum_(t, axis=1, keepdims=True), x), (lambda t: T.mean(t, axis=0), x),
        (T.l2_norm, x), (lambda t: T.matmul(t, mat), x), (lambda t: T.softmax(t, axis=1), x),
        (lambda t: T.reshape(t, (2, 6)), x), (lambda t: T.transpose(t, (1, 0)), x),
        (lambda t: T.permute(t, 0, 1), x), (lambda t: T.concat([t, other], axis=1), x),
        (lambda t: T.getitem(t, (slice(1, 3), 2)), x), (lambda t: T.pad(t, [(1, 2), (0, 1)]), x),
    ]
    for f, inp in unary:
        assert finite_diff_check(lambda t: _weighted(f(t)), Tensor(inp)) < 1e-3
    vol = Tensor(rng.normal(size=(2, 2, 3, 4, 4)))
    w3 = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    w4 = Tensor(rng.normal(size=(2, 2, 3, 3, 3, 3)))
    assert finite_diff_check(lambda t: _weighted(conv3d(t, w3)), vol) < 1e-3
    assert finite_diff_check(lambda t: _weighted(conv4d(vol, t)), w4) < 1e-3
    assert finite_diff_check(lambda t: _weighted(avg_pool_hw(t)), vol) < 1e-3
    assert finite_diff_check(lambda t: _weighted(upsample_hw(t)), vol) < 1e-3

    # composed graphs on toy shapes
    stack = Tensor(rng.uniform(size=(2, 3, 2, 8, 8)))
    target = rng.uniform(0, 0.3, size=(2, 3, 2, 8, 8))
    det = MGPDNet(NetConfig(width=2, dense_layers=1), seed=1)
    phi = PerceptualProxy()
    assert finite_diff_check(lambda t: supervised_loss(det(t).rain, target, phi), stack) < 1e-3
    depth = DERNet(DepthConfig(width=2, blocks=1), seed=1)
    dtarget = rng.uniform(size=(2, 1, 2, 8, 8))
    assert finite_diff_check(lambda t: smooth_l1(depth(t) - dtarget), stack) < 1e-3
    res = RNNAT(RestoreConfig(width=2, stages=1, dstb_blocks=1, head_gain=1.0), seed=1)
    inp = Tensor(rng.uniform(size=(2, 7, 2, 8, 8)))
    assert finite_diff_check(lambda t: generator_loss(res(t).stages[0], target, None), inp) < 1e-3
    assert time.perf_counter() - t0 < 60.0


@criterion(3)
def test_gp_matches_dense_inverse():
    rng = np.random.default_rng(11)
    for _ in range(100):
        d, n = int(rng.integers(2, 17)), int(rng.integers(1, 17))
        cfg = GpConfig(sigma_eps=float(rng.uniform(0.05, 1.0)), n_near=n, n_far=n)
        f = rng.normal(size=d)
        F_n, F_f = rng.normal(size=(2, n, d))
        mean, vn, vf = dense_inverse_gp(f, F_n, F_f, cfg.sigma_eps)
        np.testing.assert_allclose(gp_posterior(f, F_n, cfg), mean, atol=1e-8, rtol=0)
        np.testing.assert_allclose(gp_variances(f, F_n, F_f, cfg, clamp=False), (vn, vf),
                                   atol=1e-8, rtol=0)


@criterion(3)
def test_gp_worked_examples():
    cfg = GpConfig(sigma_eps=np.sqrt(0.1), n_near=2, n_far=2)
    q = np.full(2, np.sqrt(0.5))
    np.testing.assert_allclose(gp_posterior(q, np.eye(2), cfg), [0.64282, 0.64282], atol=5e-6)
    assert gp_variances(q, np.eye(2), np.eye(2), cfg)[0] == pytest.approx(0.19091, abs=5e-6)


@criterion(4)
def test_gp_interpolation_and_monotone_variance():
    rng = np.random.default_rng(12)
    cfg = GpConfig(sigma_eps=1e-4)  # sigma_eps^2 = 1e-8
    F = rng.normal(size=(6, 10))
    for i in range(6):
        np.testing.assert_allclose(gp_posterior(F[i], F, cfg), F[i], atol=1e-3)
    cfg = GpConfig(sigma_eps=0.3)
    for _ in range(20):
        d = int(rng.integers(2, 12))
        f, bank = rng.normal(size=d), rng.normal(size=(int(rng.integers(2, 16)), d))
        vals = [posterior_variance(f, bank[:k], cfg) for k in range(1, len(bank) + 1)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@criterion(5)
def test_synthesis_identities():
    _, a = depth_to_fog(np.array([1.0]), 1.8)
    assert round(float(a[0]), 5) == 0.83470
    rng = np.random.default_rng(13)
    p = SynthParams()
    b = rng.uniform(0, 0.4, size=(3, 8, 8))
    r, fog = rng.uniform(0, 0.5, size=(2, 1, 8, 8))
    i = compose(b, r, fog, p, clip=False)
    assert ((i > 0) & (i < 1)).all()
    np.testing.assert_allclose(i - p.alpha * r - (1 - p.alpha) * p.a0 * fog, b, atol=1e-15)

    def centroid(img):
        yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
        return (yy * img).sum() / img.sum(), (xx * img).sum() / img.sum()

    s = Streak(cy=16.2, cx=15.7, length=9.0, width=1.3, angle=0.2, opacity=0.8, disparity=1.1)
    layer = rasterize_streaks(p, (5, 5), (32, 32), streaks=[s])
    ref = centroid(layer[2, 2, 0])
    for u in range(5):
        for v in range(5):
            cy, cx = centroid(layer[u, v, 0])
            assert abs(cy - ref[0] - s.disparity * (u - 2)) < 0.5
            assert abs(cx - ref[1] - s.disparity * (v - 2)) < 0.5


@criterion(6)
def test_stage1_learning_signal(desk):
    print(f"stage-1 eval loss {desk['before']:.5f} -> {desk['after']:.5f} "
          f"in {desk['stage1_seconds']:.0f} s")
    assert desk["after"] < 0.9 * desk["before"]
    assert desk["stage1_seconds"] < 600.0


@criterion(6)
def test_joint_training_improves_held_out_center_view(desk):
    models = load_trained(desk["cfg"], desk["ck"])
    sc = desk["held"][0]
    out = derain_lightfield(models, sc.rainy, desk["cfg"].schedule.infer_tile)
    u, v = sc.rainy.angular[0] // 2, sc.rainy.angular[1] // 2
    clean = sc.clean.data[u, v]
    print(f"centre view PSNR input {psnr(sc.rainy.data[u, v], clean):.3f} dB, "
          f"restored {psnr(out.restored[u, v], clean):.3f} dB")
    assert psnr(out.restored[u, v], clean) > psnr(sc.rainy.data[u, v], clean)


def _stage2_pair(seed):
    """Final stage-2 loss with and without guidance from the same stage-1 weights."""
    syn = [tiny_scene(seed=3 + seed), tiny_scene(seed=13 + seed)]
    base = MGPDNet(NetConfig(width=2, dense_layers=1), seed=seed)
    banks = make_banks(3 * 8 * 8, capacity=64)
    train_stage1(base, syn, 400, lr=0.01, seed=seed, banks=banks)
    # the real domain differs: denser, steeper, more opaque streaks plus sensor noise
    clean, depth = procedural_lightfield((3, 3), (16, 16), 70 + seed)
    p = SynthParams(streak_count=140, angle_min=0.3, angle_max=0.7, opacity_min=0.6,
                    opacity_max=1.0, rng_seed=seed)
    r = synth_scene(p, clean, depth).rainy.data
    r = np.clip(r + np.random.default_rng(seed).normal(0, 0.04, r.shape), 0, 1)
    real = SceneData("real", LightField(r))
    state = base.state_dict()
    finals = {}
    for omega in (0.5, 0.0):
        m = MGPDNet(NetConfig(width=2, dense_layers=1), seed=seed)
        m.load_state_dict(state)
        losses = train_stage2(m, [real], banks, 200, GpConfig(n_near=4, n_far=4), omega=omega,
                              lr=1e-3, seed=seed)
        finals[omega] = float(np.mean(losses[-10:]))
    return finals


@criterion(7)
def test_guided_stage2_not_worse_in_most_seeds():
    wins = 0
    for seed in range(3):
        finals = _stage2_pair(seed)
        print(f"seed {seed}: guided {finals[0.5]:.5f} unguided {finals[0.0]:.5f}")
        wins += finals[0.5] <= finals[0.0]
    assert wins >= 2


@criterion(8)
def test_4d_not_worse_than_2d(desk):
    root = desk["root"]
    cfg2 = desk_config("2d")
    cmd_train(cfg2, root / "data", root / "ck_2d")
    tile = desk["cfg"].schedule.infer_tile
    p4, _ = evaluate_scenes(load_trained(desk["cfg"], desk["ck"]), desk["held"], tile)
    p2, _ = evaluate_scenes(load_trained(cfg2, root / "ck_2d"), desk["held"], tile)
    print(f"held-out PSNR 4d {p4:.3f} dB, 2d {p2:.3f} dB")
    assert p4 >= p2


@criterion(9)
def test_loss_point_values():
    assert smooth_l1(Tensor([0.5])).item() == 0.125

    class Half(Discriminator):
        def logit(self, stack):
            return Tensor(0.0)

    rng = np.random.default_rng(0)
    real, fake = rng.uniform(size=(2, 1, 3, 2, 8, 8))
    d = Half(2, rng)
    lg, ll = gan_losses(real, fake, d, d, [PatchSpec(0, 0, 4, 4)])
    assert abs(lg.item() - 2 * np.log(2)) <= 1e-12 and abs(ll.item() - 2 * np.log(2)) <= 1e-12
    assert abs(derain_loss(1.0, 2.0, 3.0, 0.01) - 1.05) <= 1e-12
    assert abs(derain_loss(0.3, 0.7, 0.2, 0.01) - (0.3 + 0.01 * 0.9)) <= 1e-12


@criterion(10)
def test_full_rerun_is_bitwise(tmp_path):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        cfg = tiny_config(seed=5)
        cmd_synth(cfg, 2, d / "data")
        cmd_synth(cfg, 1, d / "real", real=True)
        cmd_train(cfg, d / "data", d / "ck", d / "real")
        cmd_derain(cfg, d / "ck", d / "data" / "scene_000", d / "out")
        cmd_eval([(d / "out" / "derained", d / "data" / "scene_000" / "gt")], d / "metrics.csv")
        digests.append({sub: _digest(d / sub) for sub in ("data", "real", "ck", "out")})
        digests[-1]["metrics"] = (d / "metrics.csv").read_bytes()
    assert digests[0] == digests[1]


@criterion(10)
def test_checkpoint_and_bank_files_round_trip(desk, tmp_path):
    for name in ("mgpdnet", "dernet", "rnnat", "disc_global", "disc_local"):
        src = desk["ck"] / f"{name}.bin"
        save_tensors(tmp_path / "t.bin", load_tensors(src))
        assert (tmp_path / "t.bin").read_bytes() == src.read_bytes()
    for k in range(3):
        src = desk["ck"] / f"bank_{k}.bin"
        FeatureBank.load(src).save(tmp_path / "b.bin")
        assert (tmp_path / "b.bin").read_bytes() == src.read_bytes()
    store, models = CheckpointStore(desk["ck"]), build_models(desk["cfg"])
    store.load_module("rnnat", models.restorer)
    CheckpointStore(tmp_path).save_module("rnnat", models.restorer)
    assert (tmp_path / "rnnat.bin").read_bytes() == (desk["ck"] / "rnnat.bin").read_bytes()


@criterion(10)
def test_frozen_depth_unchanged_by_joint_training(desk):
    assert load_trained(desk["cfg"], desk["ck"]).depth.checksum() == desk["depth_sum"]
