import time
from pathlib import Path

import numpy as np
import pytest

from med.backbone import BackboneConfig
from med.corruption import parse_pool
from med.dataio import scan_dataset, write_png
from med.evaluate import BenchmarkGrid, parse_level, run_benchmark
from med.trainer import TrainConfig, train


def synthetic_image(size, seed):
    """Piecewise-smooth colour image: gradients, a disc and a bar."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.stack([a * xx + b * yy + c for a, b, c in rng.uniform(-0.4, 0.4, size=(3, 3)) + [0, 0, 0.5]], -1)
    cy, cx, r = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.25)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
    base[disc] = rng.uniform(0.1, 0.9, size=3)
    bar = np.abs(xx - rng.uniform(0.2, 0.8)) < 0.05
    base[bar] = base[bar] * 0.5
    return np.clip(base, 0, 1)


def natural_crops(n, size, seed):
    """Crops of the colour photographs bundled with scikit-image."""
    data = pytest.importorskip("skimage.data")
    sources = [
        data.astronaut(),
        data.chelsea(),
        data.coffee(),
        data.rocket(),
        data.immunohistochemistry(),
        data.hubble_deep_field(),
        data.retina(),
        data.colorwheel(),
    ]
    rng = np.random.default_rng(seed)
    crops = []
    for i in range(n):
        im = sources[i % len(sources)]
        h, w = im.shape[:2]
        t, l = rng.integers(h - size), rng.integers(w - size)
        crops.append(im[t : t + size, l : l + size, :3] / 255.0)
    return crops


def write_folder(root, images, prefix="img"):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        write_png(root / f"{prefix}{i:03d}.png", im)
    return root


@pytest.fixture
def image_folder(tmp_path):
    return write_folder(tmp_path / "imgs", [synthetic_image(48, s) for s in range(4)])


# desk-scale training shared by the slow tests

DESK_BACKBONE = BackboneConfig("conv_small", depth=3, channels=16)
SIGMA25 = "gaussian sigma=25:25 1"


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    crops = natural_crops(16, 96, seed=0)
    write_folder(root / "train", crops[:10])
    write_folder(root / "test", crops[10:])
    return root


def desk_cfg(schema, iters, **kw):
    base = dict(
        schema=schema,
        iters=iters,
        batch=8,
        patch=32,
        lr=1e-3,
        decay_every=max(1, int(0.6 * iters)),
        backbone=DESK_BACKBONE,
        pool=parse_pool(SIGMA25),
        ckpt_every=0,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def heldout_psnr(toy, ckpt):
    grid = BenchmarkGrid(str(toy / "test"), [parse_level("gaussian sigma=25")], [str(ckpt)], seed=0)
    return run_benchmark(grid)[0]["psnr"]


@pytest.fixture(scope="session")
def trained(toy, tmp_path_factory):
    """Runs shared by several criteria, trained once per session."""
    out = tmp_path_factory.mktemp("runs")
    man = scan_dataset(toy / "train")
    runs, times = {}, {}
    for name, cfg in (
        ("med", desk_cfg("med", 5000)),
        ("n2n", desk_cfg("n2n", 5000)),
    ):
        t = time.perf_counter()
        runs[name] = train(cfg, man, out_dir=out / name)
        times[name] = time.perf_counter() - t
    return {"runs": runs, "times": times, "manifest": man, "out": out}


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
