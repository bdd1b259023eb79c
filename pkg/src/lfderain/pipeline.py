"""Run configuration and the end-to-end workflows behind the command line.

Every workflow is a pure function of the configuration, its input
directories and the master seed: all randomness is derived from
``(seed, component)`` pairs, per-step generators are keyed by the step
index, and checkpoints hold every optimizer moment, so an interrupted run
resumes bitwise-identically.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dernet import DepthConfig, DERNet, train_dernet
from .errors import ContractError, FormatError
from .gp import FeatureBank, GpConfig
from .lightfield import LightField, read_lfi, tile_patches, to_epi_units, view_metrics, write_lfi
from .mgpdnet import MGPDNet, NetConfig, PerceptualProxy, make_banks, train_stage1, train_stage2
from .nn import CONV_MODES, Adam, Module, load_tensors, save_tensors
from .rain_synth import SceneData, SynthParams, procedural_lightfield, read_scene, synth_scene, write_scene
from .rnnat import (Discriminator, JointConfig, JointModels, LossWeights, RestoreConfig, RNNAT,
                    derain_stack, make_discriminators, train_joint)

MSGP_MODES = ("off", "mgp", "msgp")
STAGES = ("dernet", "stage1", "stage2", "joint")
LOG_COLUMNS = ("step", "stage", "L_s", "L_r", "L_g", "L_gan", "L_total")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class SceneShape:
    angular: int = 5
    height: int = 64
    width: int = 64
    max_disparity: float = 1.0


@dataclass
class BankConfig:
    capacity: int = 256


@dataclass
class NetworkWidths:
    detector: int = 8
    dense_layers: int = 3
    nonlocal_factor: int = 2
    depth: int = 8
    depth_blocks: int = 3
    restorer: int = 8
    stages: int = 3
    dstb_blocks: int = 2
    window: int = 4
    shift: bool = False
    discriminator: int = 8


@dataclass
class Schedule:
    dernet_steps: int = 100
    stage1_steps: int = 300
    stage2_steps: int = 100
    joint_steps: int = 300
    lr: float = 2e-4
    lr_decay: float = 0.5
    decay_every: int = 80
    patch_size: int = 8
    stage2_batch: int = 1
    omega: float = 0.5
    local_patch: int = 4
    local_patches: int = 4
    literal_gan: bool = False
    infer_tile: int = 16


@dataclass
class Ablation:
    conv_mode: str = "4d"
    msgp: str = "msgp"
    local_disc: bool = True


@dataclass
class RunSettings:
    seed: int = 0
    data_dir: str = "data"
    real_dir: str = ""
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


@dataclass
class RunConfig:
    """All knobs of a run, grouped in the sections of the config file."""

    synth: SynthParams = field(default_factory=SynthParams)
    scene: SceneShape = field(default_factory=SceneShape)
    gp: GpConfig = field(default_factory=GpConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    network: NetworkWidths = field(default_factory=NetworkWidths)
    schedule: Schedule = field(default_factory=Schedule)
    ablation: Ablation = field(default_factory=Ablation)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        self.synth.validate()
        self.gp.validate()
        self.loss.validate()
        if self.ablation.conv_mode not in CONV_MODES:
            raise ContractError(f"conv_mode must be one of {CONV_MODES}, got {self.ablation.conv_mode!r}")
        if self.ablation.msgp not in MSGP_MODES:
            raise ContractError(f"msgp must be one of {MSGP_MODES}, got {self.ablation.msgp!r}")
        if not 0.0 <= self.schedule.omega <= 1.0:
            raise ContractError("omega must lie in [0, 1]")
        t = self.schedule.infer_tile
        if t % self.network.window or t % 4:
            raise ContractError(f"infer_tile {t} must be a multiple of 4 and of the window")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise FormatError(f"unreadable config: {exc}") from None
        cfg = cls()
        known = {f.name for f in dataclasses.fields(cfg)}
        for sec in cp.sections():
            if sec not in known:
                raise FormatError(f"unknown config section [{sec}]")
            obj = getattr(cfg, sec)
            kinds = {f.name: f.type for f in dataclasses.fields(obj)}
            vals = {}
            for key, raw in cp[sec].items():
                if key not in kinds:
                    raise FormatError(f"unknown key {key!r} in [{sec}]")
                vals[key] = _parse(raw, kinds[key], f"[{sec}] {key}")
            setattr(cfg, sec, replace(obj, **vals))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise FormatError(f"{p}: cannot read config ({exc.strerror})") from None
        return cls.from_text(text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, kind, where: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise FormatError(f"{where}: cannot parse {raw!r} as {kind}") from None


_COMPONENTS = {"scene": 1, "streaks": 2, "depth": 3, "detector": 4, "restorer": 5,
               "discriminator": 6, "train": 7, "real": 8}


def component_seed(master: int, component: str, index: int = 0) -> int:
    """Independent 32-bit seed for one component, derived from the master seed."""
    ss = np.random.SeedSequence([int(master), _COMPONENTS[component], int(index)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# synthesis

def cmd_synth(cfg: RunConfig, count: int, out_dir: str | Path, real: bool = False) -> list[Path]:
    """Write ``count`` scene bundles plus ``manifest.txt``.

    Synthetic bundles hold input/gt/rain/depth/fog; with ``real`` only the
    rainy input is written, standing in for captures without ground truth.
    """
    cfg.synth.validate()
    if count < 0:
        raise ContractError("scene count must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = "real" if real else "synthetic"
    seed_kind = "real" if real else "scene"
    dirs = []
    sh = cfg.scene
    for i in range(count):
        name = f"scene_{i:03d}"
        clean, depth = procedural_lightfield((sh.angular, sh.angular), (sh.height, sh.width),
                                             component_seed(cfg.run.seed, seed_kind, i),
                                             sh.max_disparity)
        params = replace(cfg.synth, rng_seed=component_seed(cfg.run.seed, "streaks", 2 * i + real))
        scene = synth_scene(params, clean, depth)
        d = out / name
        if real:
            write_lfi(scene.rainy, d / "input")
        else:
            write_scene(scene, d)
        dirs.append(d)
    lines = [f"kind={kind}", f"count={count}", f"seed={cfg.run.seed}"] + [d.name for d in dirs]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return dirs


def list_scene_dirs(data_dir: str | Path) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise ContractError(f"{d}: data directory does not exist")
    return sorted(p for p in d.iterdir() if (p / "input").is_dir())


def load_scenes(data_dir: str | Path) -> list[SceneData]:
    return [read_scene(p) for p in list_scene_dirs(data_dir)]


# ---------------------------------------------------------------------------
# models and checkpoints

@dataclass
class Models:
    detector: MGPDNet
    depth: DERNet
    restorer: RNNAT
    d_global: Discriminator
    d_local: Discriminator | None
    phi: PerceptualProxy

    def named(self) -> dict[str, Module]:
        out = {"mgpdnet": self.detector, "dernet": self.depth, "rnnat": self.restorer,
               "disc_global": self.d_global}
        if self.d_local is not None:
            out["disc_local"] = self.d_local
        return out


def build_models(cfg: RunConfig) -> Models:
    n, mode, seed = cfg.network, cfg.ablation.conv_mode, cfg.run.seed
    detector = MGPDNet(NetConfig(n.detector, n.dense_layers, mode, True, n.nonlocal_factor),
                       component_seed(seed, "detector"))
    depth = DERNet(DepthConfig(n.depth, n.depth_blocks, mode), component_seed(seed, "depth"))
    restorer = RNNAT(RestoreConfig(n.restorer, n.stages, n.dstb_blocks, n.window, n.shift, mode),
                     component_seed(seed, "restorer"))
    d_g, d_l = make_discriminators(n.discriminator, component_seed(seed, "discriminator"), mode,
                                   cfg.ablation.local_disc)
    return Models(detector, depth, restorer, d_g, d_l, PerceptualProxy())


class CheckpointStore:
    """Directory of module weights, optimizer moments, feature banks and progress.

    ``state.txt`` records completed stages and the step reached in the
    current one; ``loss_log.csv`` holds one row per executed step.
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)

    def path(self, name: str) -> Path:
        return self.dir / name

    def has(self, name: str) -> bool:
        return (self.dir / f"{name}.bin").exists()

    def save_module(self, name: str, module: Module) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        save_tensors(self.dir / f"{name}.bin", module.state_dict())

    def load_module(self, name: str, module: Module) -> None:
        p = self.dir / f"{name}.bin"
        if not p.exists():
            raise ContractError(f"{p}: checkpoint missing")
        try:
            module.load_state_dict(load_tensors(p))
        except ContractError as exc:
            raise ContractError(f"{p}: {exc}") from None

    def save_optimizer(self, name: str, opt: Adam) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        save_tensors(self.dir / f"opt_{name}.bin", opt.state())

    def load_optimizer(self, name: str, opt: Adam) -> None:
        p = self.dir / f"opt_{name}.bin"
        if p.exists():
            opt.load_state(load_tensors(p))

    def save_banks(self, banks: Sequence[FeatureBank]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for k, b in enumerate(banks):
            b.save(self.dir / f"bank_{k}.bin")

    def load_banks(self, capacity: int, scales: int = 3) -> list[FeatureBank] | None:
        paths = [self.dir / f"bank_{k}.bin" for k in range(scales)]
        if not all(p.exists() for p in paths):
            return None
        return [FeatureBank.load(p, capacity) for p in paths]

    def read_state(self) -> dict:
        p = self.dir / "state.txt"
        state = {"done": [], "stage": STAGES[0], "step": 0}
        if not p.exists():
            return state
        for line in p.read_text().splitlines():
            key, _, val = line.partition("=")
            if key == "done":
                state["done"] = [s for s in val.split(",") if s]
            elif key == "stage":
                state["stage"] = val
            elif key == "step":
                state["step"] = int(val)
        return state

    def write_state(self, state: dict) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        text = f"done={','.join(state['done'])}\nstage={state['stage']}\nstep={state['step']}\n"
        (self.dir / "state.txt").write_text(text)


class LossLog:
    def __init__(self, path: Path):
        self.path = path
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(",".join(LOG_COLUMNS) + "\n")
        self.count = len(path.read_text().splitlines()) - 1

    def append(self, stage: str, values: dict) -> None:
        cells = [str(self.count), stage] + [repr(values[c]) if c in values else ""
                                            for c in LOG_COLUMNS[2:]]
        with self.path.open("a") as f:
            f.write(",".join(cells) + "\n")
        self.count += 1


def _load_existing(store: CheckpointStore, models: Models) -> None:
    for name, module in models.named().items():
        if store.has(name):
            store.load_module(name, module)


def _save_all(store: CheckpointStore, models: Models) -> None:
    for name, module in models.named().items():
        store.save_module(name, module)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    completed: list[str]
    finished: bool
    steps_run: int


def stage_lengths(cfg: RunConfig, has_real: bool) -> dict[str, int]:
    s = cfg.schedule
    run_stage2 = has_real and cfg.ablation.msgp != "off"
    return {"dernet": s.dernet_steps, "stage1": s.stage1_steps,
            "stage2": s.stage2_steps if run_stage2 else 0, "joint": s.joint_steps}


def cmd_train(cfg: RunConfig, data_dir: str | Path | None = None, ckpt_dir: str | Path | None = None,
              real_dir: str | Path | None = None, max_steps: int | None = None,
              only: str | None = None) -> TrainResult:
    """Staged training (depth, detector stage 1, detector stage 2, joint) with resume.

    ``max_steps`` bounds the number of steps executed by this call; a later
    call with the same checkpoint directory picks up where it stopped.
    ``only`` runs a single stage and insists that its prerequisites exist.
    """
    cfg.validate()
    data_dir = Path(data_dir or cfg.run.data_dir)
    store = CheckpointStore(ckpt_dir or cfg.run.checkpoint_dir)
    real_path = real_dir if real_dir is not None else (cfg.run.real_dir or None)
    scenes = load_scenes(data_dir)
    if not scenes:
        raise ContractError(f"{data_dir}: no scenes found")
    missing_gt = [s.name for s in scenes if s.rain is None or s.depth is None or s.clean is None]
    if missing_gt:
        raise ContractError(f"{data_dir}: scenes without ground truth: {', '.join(missing_gt)}")
    real = load_scenes(real_path) if real_path else []
    lengths = stage_lengths(cfg, bool(real))

    state = store.read_state()
    if only is not None:
        if only not in STAGES:
            raise ContractError(f"unknown stage {only!r}; expected one of {STAGES}")
        _check_prerequisites(only, state, store)
    models = build_models(cfg)
    _load_existing(store, models)
    if "dernet" in state["done"]:
        models.depth.freeze()
    log = LossLog(store.path("loss_log.csv"))
    sched = cfg.schedule
    budget = np.inf if max_steps is None else int(max_steps)
    run = 0
    train_seed = component_seed(cfg.run.seed, "train")

    def opt_for(name, modules):
        opt = Adam(modules, lr=sched.lr, decay=sched.lr_decay, decay_every=sched.decay_every)
        store.load_optimizer(name, opt)
        return opt

    for stage in STAGES:
        if stage in state["done"] or (only is not None and stage != only):
            continue
        total = lengths[stage]
        start = state["step"] if state["stage"] == stage else 0
        end = int(min(total, start + budget - run))

        def record(step, values, stage=stage):
            values = dict(values)
            if stage == "dernet":
                values = {"L_total": values["L_d"]}
            elif stage == "stage1":
                values["L_total"] = values["L_s"]
            elif stage == "stage2":
                values["L_total"] = values["L_r"]
            log.append(stage, values)

        if stage == "dernet":
            opt = opt_for("dernet", [models.depth])
            train_dernet(models.depth, scenes, end, patch_size=sched.patch_size, seed=train_seed,
                         optimizer=opt, start_step=start, freeze=False, on_step=record)
            store.save_optimizer("dernet", opt)
        elif stage == "stage1":
            banks = store.load_banks(cfg.bank.capacity) or make_banks(
                3 * sched.patch_size ** 2, cfg.bank.capacity)
            opt = opt_for("stage1", [models.detector])
            train_stage1(models.detector, scenes, end, patch_size=sched.patch_size, seed=train_seed,
                         banks=banks, phi=models.phi, lambda_p=cfg.loss.lambda_p, optimizer=opt,
                         start_step=start, on_step=record)
            store.save_optimizer("stage1", opt)
            store.save_banks(banks)
        elif stage == "stage2" and end > start:
            banks = store.load_banks(cfg.bank.capacity)
            omega = sched.omega if cfg.ablation.msgp == "msgp" else 0.0
            opt = opt_for("stage2", [models.detector])
            train_stage2(models.detector, real, banks, end, cfg.gp, omega, patch_size=sched.patch_size,
                         batch=sched.stage2_batch, seed=train_seed, phi=models.phi,
                         lambda_gp=cfg.loss.lambda_gp, lambda_p_real=cfg.loss.lambda_p_real,
                         optimizer=opt, start_step=start, on_step=record)
            store.save_optimizer("stage2", opt)
        elif stage == "joint":
            models.depth.freeze()
            jm = JointModels(models.detector, models.depth, models.restorer, models.d_global,
                             models.d_local, sched.lr, sched.lr_decay, sched.decay_every)
            store.load_optimizer("generator", jm.gen_opt)
            store.load_optimizer("discriminator", jm.disc_opt)
            jcfg = JointConfig(end, sched.lr, sched.patch_size, sched.local_patch, sched.local_patches,
                               cfg.ablation.local_disc, sched.literal_gan, cfg.synth.beta, train_seed)
            train_joint(jm, scenes + real, jcfg, models.phi, cfg.loss, start_step=start, on_step=record)
            store.save_optimizer("generator", jm.gen_opt)
            store.save_optimizer("discriminator", jm.disc_opt)
        run += end - start
        _save_all(store, models)
        if end < total:
            state.update(stage=stage, step=end)
            store.write_state(state)
            return TrainResult(list(state["done"]), False, run)
        state["done"].append(stage)
        if stage == "dernet":
            models.depth.freeze()
        nxt = STAGES.index(stage) + 1
        state.update(stage=STAGES[nxt] if nxt < len(STAGES) else "finished", step=0)
        store.write_state(state)
    return TrainResult(list(state["done"]), all(s in state["done"] for s in STAGES), run)


def _check_prerequisites(stage: str, state: dict, store: CheckpointStore) -> None:
    need = {"dernet": [], "stage1": [], "stage2": ["stage1"], "joint": ["dernet", "stage1"]}[stage]
    for pre in need:
        ckpt = {"dernet": "dernet", "stage1": "mgpdnet"}[pre]
        if pre not in state["done"] or not store.has(ckpt):
            raise ContractError(
                f"{stage} training requires a completed {pre} checkpoint ({ckpt}.bin) in {store.dir}")


# ---------------------------------------------------------------------------
# inference

@dataclass
class DerainResult:
    restored: np.ndarray   # [U, V, 3, H, W]
    rain: np.ndarray       # [U, V, 3, H, W]
    depth: np.ndarray      # [U, V, 1, H, W]
    fog: np.ndarray        # [U, V, 1, H, W]


def load_trained(cfg: RunConfig, ckpt_dir: str | Path) -> JointModels:
    models = build_models(cfg)
    store = CheckpointStore(ckpt_dir)
    for name in ("mgpdnet", "dernet", "rnnat"):
        store.load_module(name, models.named()[name])
    models.depth.freeze()
    return JointModels(models.detector, models.depth, models.restorer, models.d_global,
                       models.d_local)


def derain_lightfield(models: JointModels, lf: LightField, tile: int, beta: float = 1.8) -> DerainResult:
    """Run the three networks tile by tile over every sub-view."""
    if lf.channels != 3:
        raise ContractError("deraining needs RGB light fields")
    U, V = lf.angular
    H, W = lf.spatial
    outs = [np.zeros((U, V, c, H, W)) for c in (3, 3, 1, 1)]
    for p in tile_patches(H, W, tile, tile):
        stack = to_epi_units(lf, p).data
        for full, part in zip(outs, derain_stack(models, stack, beta)):
            full[:, :, :, p.y:p.y + p.h, p.x:p.x + p.w] = part.transpose(0, 2, 1, 3, 4)
    return DerainResult(*outs)


def _scene_input(scene_dir: Path) -> LightField:
    src = scene_dir / "input" if (scene_dir / "input").is_dir() else scene_dir
    return read_lfi(src, scene_dir.name)


def cmd_derain(cfg: RunConfig, ckpt_dir: str | Path, scene_dir: str | Path,
               out_dir: str | Path) -> DerainResult:
    """Write derained views, rain, depth and fog maps under ``out_dir``."""
    cfg.validate()
    models = load_trained(cfg, ckpt_dir)
    lf = _scene_input(Path(scene_dir))
    res = derain_lightfield(models, lf, cfg.schedule.infer_tile, cfg.synth.beta)
    out = Path(out_dir)
    depth_scale = float(max(res.depth.max(), 1e-12))
    write_lfi(LightField(res.restored), out / "derained")
    write_lfi(LightField(np.clip(res.rain, 0.0, 1.0)), out / "rain")
    write_lfi(LightField(res.depth / depth_scale), out / "depth")
    write_lfi(LightField(res.fog), out / "fog")
    (out / "manifest.txt").write_text(
        f"depth_scale={depth_scale!r}\nrain_clipped_to=[0,1]\nperceptual=fixed-seed conv features\n")
    return res


# ---------------------------------------------------------------------------
# evaluation

def _first_missing(a: LightField, b: LightField) -> str:
    for u in range(max(a.angular[0], b.angular[0])):
        for v in range(max(a.angular[1], b.angular[1])):
            if u >= min(a.angular[0], b.angular[0]) or v >= min(a.angular[1], b.angular[1]):
                return f"view_{u}_{v}"
    return "view_0_0"


def cmd_eval(pairs: Sequence[tuple[str | Path, str | Path]], out_csv: str | Path | None = None) -> list[dict]:
    """Per-view PSNR/SSIM for ``(output, reference)`` directory pairs plus a mean row.

    The mean row averages views within each scene first, then scenes.
    """
    if not pairs:
        raise ContractError("no directory pairs to evaluate")
    rows, scene_means = [], []
    for out_dir, ref_dir in pairs:
        out_dir, ref_dir = Path(out_dir), Path(ref_dir)
        a, b = read_lfi(out_dir), read_lfi(ref_dir)
        if a.angular != b.angular or a.data.shape != b.data.shape:
            raise ContractError(f"{out_dir} vs {ref_dir}: views misaligned at {_first_missing(a, b)} "
                                f"(shapes {a.data.shape} vs {b.data.shape})")
        name = out_dir.parent.name if out_dir.name in ("derained", "input", "gt") else out_dir.name
        r = view_metrics(name, a, b)
        rows.extend(r)
        scene_means.append((np.mean([x["psnr_db"] for x in r]), np.mean([x["ssim"] for x in r])))
    summary = {"scene": "mean", "view_u": "", "view_v": "",
               "psnr_db": float(np.mean([m[0] for m in scene_means])),
               "ssim": float(np.mean([m[1] for m in scene_means]))}
    rows.append(summary)
    if out_csv is not None:
        write_rows(out_csv, rows, ("scene", "view_u", "view_v", "psnr_db", "ssim"))
    return rows


def write_rows(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])


# ---------------------------------------------------------------------------
# ablations

def evaluate_scenes(models: JointModels, scenes: Sequence[SceneData], tile: int,
                    beta: float = 1.8) -> tuple[float, float]:
    """Mean PSNR/SSIM of the restored views against ground truth, views then scenes."""
    ps, ss = [], []
    for s in scenes:
        res = derain_lightfield(models, s.rainy, tile, beta)
        rows = view_metrics(s.name, LightField(res.restored), s.clean)
        ps.append(np.mean([r["psnr_db"] for r in rows]))
        ss.append(np.mean([r["ssim"] for r in rows]))
    return float(np.mean(ps)), float(np.mean(ss))


def ablation_variants(cfg: RunConfig, has_real: bool) -> list[tuple[str, str, RunConfig]]:
    out = []
    for mode in CONV_MODES:
        out.append(("conv_mode", mode, replace(cfg, ablation=replace(cfg.ablation, conv_mode=mode))))
    if has_real:
        for m in MSGP_MODES:
            out.append(("msgp", m, replace(cfg, ablation=replace(cfg.ablation, msgp=m))))
    return out


def cmd_ablate(cfg: RunConfig, work_dir: str | Path, data_dir: str | Path | None = None,
               eval_dir: str | Path | None = None, real_dir: str | Path | None = None,
               variants: Sequence[tuple[str, str]] | None = None) -> list[dict]:
    """Train and score one pipeline per ablation setting; writes ``ablation.csv``.

    Scores are computed on ``eval_dir`` scenes (the training scenes when
    omitted).  ``variants`` restricts the run to chosen ``(flag, value)``
    pairs.
    """
    data_dir = Path(data_dir or cfg.run.data_dir)
    real_path = real_dir if real_dir is not None else (cfg.run.real_dir or None)
    held_out = load_scenes(eval_dir or data_dir)
    if any(s.clean is None for s in held_out):
        raise ContractError("ablation scoring needs scenes with ground truth")
    work = Path(work_dir)
    rows = []
    for flag, value, vcfg in ablation_variants(cfg, bool(real_path)):
        if variants is not None and (flag, value) not in variants:
            continue
        ckpt = work / f"{flag}_{value}"
        cmd_train(vcfg, data_dir, ckpt, real_path)
        psnr_db, ssim_v = evaluate_scenes(load_trained(vcfg, ckpt), held_out,
                                          vcfg.schedule.infer_tile, vcfg.synth.beta)
        rows.append({"ablation": flag, "value": value, "psnr_db": psnr_db, "ssim": ssim_v})
    write_rows(work / "ablation.csv", rows, ("ablation", "value", "psnr_db", "ssim"))
    return rows
