import numpy as np
import pytest

from lfderain.lightfield import LightField, PatchSpec, to_epi_units
from lfderain.rain_synth import SceneData, SynthParams, procedural_lightfield, synth_scene


def tiny_scene(seed=3, angular=(3, 3), spatial=(16, 16), depth=None, name="tiny"):
    clean, d = procedural_lightfield(angular, spatial, seed)
    if depth is not None:
        d = LightField(depth)
    return SceneData.from_scene(synth_scene(SynthParams(rng_seed=seed + 100), clean, d), name)


def full_stacks(scene):
    """Rainy, rain-target, clean and depth stacks covering the whole view."""
    H, W = scene.rainy.spatial
    p = PatchSpec(0, 0, H, W)
    return (to_epi_units(scene.rainy, p).data, to_epi_units(LightField(scene.rain_target()), p).data,
            to_epi_units(scene.clean, p).data, to_epi_units(scene.depth, p).data)


@pytest.fixture(scope="session")
def scene():
    return tiny_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(seed=0):
    """A run small enough to train every stage in a few seconds."""
    from lfderain.pipeline import RunConfig
    cfg = RunConfig()
    cfg.run.seed = seed
    cfg.scene.angular, cfg.scene.height, cfg.scene.width = 3, 16, 16
    n = cfg.network
    n.detector = n.depth = n.restorer = n.discriminator = 2
    n.dense_layers, n.depth_blocks, n.stages, n.dstb_blocks = 1, 1, 2, 1
    s = cfg.schedule
    s.dernet_steps, s.stage1_steps, s.stage2_steps, s.joint_steps = 2, 3, 2, 2
    s.lr = 1e-3
    cfg.bank.capacity = 8
    cfg.gp.n_near = cfg.gp.n_far = 2
    return cfg


_verdicts: dict[int, list[str]] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    if call.when == "call" or call.excinfo is not None:
        ok = call.excinfo is None
        _verdicts.setdefault(mark.args[0], []).append(("PASS" if ok else "FAIL") + " " + item.name)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        results = _verdicts[n]
        status = "PASS" if all(r.startswith("PASS") for r in results) else "FAIL"
        names = ", ".join(r.split(" ", 1)[1] for r in results)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({names})")
