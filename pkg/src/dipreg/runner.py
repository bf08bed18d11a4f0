"""Method dispatch, pad-then-crop handling and suite execution shared by the
command line and the benchmark harness."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .baseline import BaselineConfig, register_baseline
from .core import Tensor
from .engine import ImagePair, RunConfig, RunResult, register
from .fileio import load_field, load_image
from .metrics import PairMetrics, evaluate_pair, ssim
from .synth import SynthSpec, synth_pair
from .warp import deformation, warp

logger = logging.getLogger(__name__)

BASELINE_LABEL = ("variational analog of the affine+deformable toolkit comparison "
                  "(first-order diffusion regularizer, no affine stage); not a replica")
IMAGE_SUFFIXES = (".pgm", ".png")


def padded_size(h: int, w: int, divisor: int) -> tuple[int, int]:
    """Smallest multiples of ``divisor`` covering H x W whose bottleneck keeps
    at least two pixels."""
    ph, pw = -(-h // divisor) * divisor, -(-w // divisor) * divisor
    if (ph // divisor) * (pw // divisor) < 2:
        ph += divisor
    return ph, pw


def pad_image(img: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Zero-pad a C x H x W image symmetrically to ``size``."""
    _, h, w = img.shape
    top, left = (size[0] - h) // 2, (size[1] - w) // 2
    pads = (top, size[0] - h - top, left, size[1] - w - left)
    return np.pad(img, ((0, 0), pads[:2], pads[2:])), pads


def crop(img: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    return img[..., top:img.shape[-2] - bottom, left:img.shape[-1] - right]


def run_dip(pair: ImagePair, config: RunConfig) -> RunResult:
    """Register with padding to the generator's divisibility, then crop back.
    The returned warped image is recomputed on the original grid."""
    _, h, w = pair.shape
    size = padded_size(h, w, config.generator.divisor)
    if size == (h, w):
        return register(pair, config)
    moving, pads = pad_image(pair.moving, size)
    fixed, _ = pad_image(pair.fixed, size)
    res = register(ImagePair(moving, fixed), config)
    u = np.ascontiguousarray(crop(res.u, pads))
    phi = deformation(Tensor(u)).data
    warped = warp(Tensor(pair.moving), Tensor(phi)).data
    return dataclasses.replace(res, u=u, phi=phi, warped=warped)


@dataclass(frozen=True)
class MethodSpec:
    """A method token such as ``dip``, ``baseline`` or ``baseline@0`` (lambda 0)."""

    name: str
    lam: float | None = None

    @property
    def label(self) -> str:
        if self.lam is None:
            return self.name
        return f"{self.name}@{self.lam:g}"

    @classmethod
    def parse(cls, token: str) -> MethodSpec:
        token = token.strip()
        name, _, lam = token.partition("@")
        if name not in cfgmod.METHODS:
            raise cfgmod.ConfigError(
                f"unknown method {name!r}; choose from {', '.join(cfgmod.METHODS)}")
        if lam and name != "baseline":
            raise cfgmod.ConfigError(f"only the baseline takes a lambda suffix, got {token!r}")
        try:
            return cls(name, float(lam) if lam else None)
        except ValueError:
            raise cfgmod.ConfigError(f"invalid lambda in method {token!r}") from None


def run_method(pair: ImagePair, method: MethodSpec, values: dict[str, str],
               seed: int | None = None) -> RunResult:
    if method.name == "dip":
        res = run_dip(pair, cfgmod.run_config(values, seed))
    else:
        bcfg: BaselineConfig = cfgmod.baseline_config(values, seed)
        if method.lam is not None:
            bcfg = dataclasses.replace(bcfg, lam=method.lam)
        res = register_baseline(pair, bcfg)
    return dataclasses.replace(res, method=method.label)


# suites ---------------------------------------------------------------------

@dataclass
class SuiteItem:
    name: str
    moving: str | None = None
    fixed: str | None = None
    ground_truth: str | None = None
    synth: SynthSpec | None = None

    def load(self) -> tuple[ImagePair, np.ndarray | None]:
        if self.synth is not None:
            return synth_pair(self.synth)
        pair = ImagePair(load_image(self.moving), load_image(self.fixed))
        gt = load_field(self.ground_truth) if self.ground_truth else None
        return pair, gt


def synth_suite(pairs: int, spec: SynthSpec) -> list[SuiteItem]:
    return [SuiteItem(f"synth{i:03d}", synth=dataclasses.replace(spec, seed=spec.seed + i))
            for i in range(pairs)]


def spec_from_manifest(values: dict[str, str]) -> tuple[int, SynthSpec]:
    known = {"pairs", "size", "pattern", "grid_spacing", "max_displacement", "sigma", "seed"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise cfgmod.ConfigError(f"unknown manifest keys: {', '.join(unknown)}")
    try:
        n = int(values.get("pairs", 10))
        size = int(values.get("size", 128))
        spec = SynthSpec(size=(size, size), pattern=values.get("pattern", "blobs"),
                         grid_spacing=int(values.get("grid_spacing", 32)),
                         max_displacement=float(values.get("max_displacement", 8.0)),
                         sigma=float(values.get("sigma", 1.0)),
                         seed=int(values.get("seed", 0)))
    except ValueError as exc:
        raise cfgmod.ConfigError(f"invalid manifest value: {exc}") from None
    if n < 1:
        raise cfgmod.ConfigError("manifest needs pairs >= 1")
    return n, spec


def discover_suite(path) -> list[SuiteItem]:
    """A directory of ``<name>_input.*`` / ``<name>_target.*`` images (optional
    ``<name>_gt.dipf``), or a flat key-value synthetic manifest file."""
    path = Path(path)
    if path.is_file():
        return synth_suite(*spec_from_manifest(cfgmod.read_config(path)))
    if not path.is_dir():
        raise FileNotFoundError(f"no such suite: {path}")
    items = []
    for moving in sorted(path.iterdir()):
        stem, suffix = moving.stem, moving.suffix.lower()
        if suffix not in IMAGE_SUFFIXES or not stem.endswith("_input"):
            continue
        name = stem[: -len("_input")]
        targets = [path / f"{name}_target{s}" for s in IMAGE_SUFFIXES]
        target = next((t for t in targets if t.is_file()), None)
        if target is None:
            raise FileNotFoundError(f"pair {name!r} in {path} has no _target image")
        gt = path / f"{name}_gt.dipf"
        items.append(SuiteItem(name, str(moving), str(target), str(gt) if gt.is_file() else None))
    if not items:
        raise FileNotFoundError(f"suite directory {path} contains no *_input image pairs")
    return items


@dataclass
class BenchRow:
    pair: str
    method: str
    status: str
    metrics: PairMetrics | None = None
    unregistered_ssim: float | None = None
    error: str = ""
    elapsed: float = 0.0


def run_item(item: SuiteItem, method: MethodSpec, values: dict[str, str],
             seed: int | None) -> BenchRow:
    try:
        pair, _ = item.load()
        res = run_method(pair, method, values, seed)
        m = evaluate_pair(pair, res)
        m = dataclasses.replace(m, pair=item.name)
        return BenchRow(item.name, method.label, "ok", m, ssim(pair.fixed[:1], pair.moving[:1]),
                        elapsed=res.elapsed)
    except Exception as exc:  # recorded per row; one bad pair must not stop a suite
        logger.warning("pair %s method %s failed: %s", item.name, method.label, exc)
        return BenchRow(item.name, method.label, "failed", error=f"{type(exc).__name__}: {exc}")


def _run_job(args):
    return run_item(*args)


def run_suite(items: list[SuiteItem], methods: list[MethodSpec], values: dict[str, str],
              seed: int | None = None, jobs: int = 1) -> list[BenchRow]:
    """Every pair under every method; rows come back in (pair, method) order."""
    tasks = [(item, m, values, seed) for item in items for m in methods]
    jobs = max(1, min(jobs, len(tasks), os.cpu_count() or 1)) if jobs else 1
    if jobs == 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))
