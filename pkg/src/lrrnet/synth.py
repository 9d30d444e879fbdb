"""Synthetic infrared scenes: low-rank background + Gaussian targets + white noise."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .io import atomic_write_text, load_image, read_pgm, to_uint8, write_pgm

log = logging.getLogger(__name__)

BG_RANGE = (0.1, 0.7)
ANNULUS_WIDTH = 10
SUPPORT_SIGMAS = 3.0  # target profiles are cut off beyond this many sigma
MAX_PLACEMENT_TRIES = 1000


class PlacementError(RuntimeError):
    def __init__(self, requested: int, achieved: int):
        super().__init__(f"could only place {achieved} of {requested} targets under the separation constraints")
        self.requested = requested
        self.achieved = achieved


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    bg_rank: int = 3
    bg_smooth: float = 12.0
    n_targets: int = 2
    target_amp: float = 0.3
    target_sigma: float = 1.5
    noise_sigma: float = 10.0
    mask_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.H < 32 or self.W < 32:
            raise ValueError(f"scenes must be at least 32x32, got {self.H}x{self.W}")
        if self.bg_rank < 1:
            raise ValueError("bg_rank must be >= 1")
        if self.target_sigma <= 0:
            raise ValueError("target_sigma must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.target_amp <= 1:
            raise ValueError("target_amp must lie in [0, 1]")
        if not 0 < self.mask_frac < 1:
            raise ValueError("mask_frac must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Target:
    cy: float
    cx: float
    amp: float
    sigma: float
    mask_frac: float = 0.5

    @property
    def radius(self) -> float:
        """Radius of the disc where the profile exceeds ``mask_frac`` of its peak."""
        return self.sigma * math.sqrt(2.0 * math.log(1.0 / self.mask_frac))

    @property
    def support(self) -> float:
        return SUPPORT_SIGMAS * self.sigma

    def _d2(self, shape):
        yy, xx = np.indices(shape, dtype=np.float64)
        return (yy - self.cy) ** 2 + (xx - self.cx) ** 2

    def disc(self, shape) -> np.ndarray:
        return self._d2(shape) < self.radius**2

    def footprint(self, shape) -> np.ndarray:
        return self._d2(shape) <= self.support**2

    def field(self, shape) -> np.ndarray:
        """Gaussian profile, zero outside ``3 * sigma`` (under one grey level at amp <= 0.3)."""
        d2 = self._d2(shape)
        out = self.amp * np.exp(-d2 / (2.0 * self.sigma**2))
        out[d2 > self.support**2] = 0.0
        return out


@dataclass
class Scene:
    image: np.ndarray
    mask: np.ndarray
    targets: list
    scr: float
    noise_sigma: float
    seed: int = 0
    config: SceneConfig | None = None
    background: np.ndarray | None = field(default=None, repr=False)
    target_field: np.ndarray | None = field(default=None, repr=False)


def _streams(seed: int, n: int = 3):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_background(H: int, W: int, r: int, smooth: float, seed) -> np.ndarray:
    """Sum of ``r`` outer products of smoothed Gaussian vectors, rescaled to [0.1, 0.7].

    The first column factor is constant, so the affine rescale folds into
    it and the result has rank at most ``r``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.standard_normal((r, H))
    v = rng.standard_normal((r, W))
    if smooth > 0:
        u = gaussian_filter1d(u, smooth, axis=1, mode="reflect")
        v = gaussian_filter1d(v, smooth, axis=1, mode="reflect")
    u[0] = 1.0
    b = u.T @ v
    lo, hi = b.min(), b.max()
    span = hi - lo
    if span == 0:
        return np.full((H, W), BG_RANGE[0])
    scale = (BG_RANGE[1] - BG_RANGE[0]) / span
    # row 0 of u is all ones: shifting v[0] shifts the whole matrix
    v = v * scale
    v[0] += BG_RANGE[0] - lo * scale
    out = u.T @ v
    return np.clip(out, BG_RANGE[0], BG_RANGE[1])


def place_targets(bg, n: int, amp: float, sigma: float, mask_frac: float = 0.5, seed=0, clamp: bool = True):
    """Add ``n`` Gaussian targets at rejection-sampled positions.

    Centres keep ``3*sigma`` from the border and ``6*sigma`` from each other.
    Returns ``(image, mask, targets, field)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bg = np.asarray(bg, dtype=np.float64)
    h, w = bg.shape
    margin = 3.0 * sigma
    targets: list[Target] = []
    tries = 0
    while len(targets) < n:
        if tries >= MAX_PLACEMENT_TRIES:
            raise PlacementError(n, len(targets))
        tries += 1
        cy = rng.uniform(margin, h - 1 - margin)
        cx = rng.uniform(margin, w - 1 - margin)
        if all(math.hypot(cy - t.cy, cx - t.cx) >= 6.0 * sigma for t in targets):
            targets.append(Target(float(cy), float(cx), float(amp), float(sigma), float(mask_frac)))
    tfield = np.zeros_like(bg)
    for t in targets:
        tfield += t.field(bg.shape)
    mask = tfield > mask_frac * amp if targets and amp > 0 else np.zeros(bg.shape, dtype=bool)
    image = bg + tfield
    if clamp:
        image = np.clip(image, 0.0, 1.0)
    return image, mask, targets, tfield


def add_noise(image, sigma_n: float, seed=0, clamp: bool = True) -> np.ndarray:
    """Additive white Gaussian noise with std ``sigma_n / 255``."""
    if sigma_n < 0:
        raise ValueError("noise sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma_n == 0:
        return image.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = image + rng.standard_normal(image.shape) * (sigma_n / 255.0)
    return np.clip(out, 0.0, 1.0) if clamp else out


def scr(image, target: Target, mask=None, width: int = ANNULUS_WIDTH, others=()) -> float:
    """Signal-to-clutter ratio ``(mu_t - mu_b) / sigma_b``.

    ``mu_t`` averages the target's disc (its mask region). ``mu_b`` and
    ``sigma_b`` use the ``width``-pixel annulus just outside the target's
    support, excluding ``mask`` and the support of any target in ``others``.
    Returns ``inf`` when that annulus is flat.
    """
    image = np.asarray(image, dtype=np.float64)
    disc = target.disc(image.shape)
    if not disc.any():
        yy, xx = int(round(target.cy)), int(round(target.cx))
        disc = np.zeros(image.shape, dtype=bool)
        disc[yy, xx] = True
    d = np.sqrt(target._d2(image.shape))
    ring = (d > target.support) & (d <= target.support + width)
    if mask is not None:
        ring &= ~np.asarray(mask, dtype=bool)
    for o in others:
        ring &= ~o.footprint(image.shape)
    if not ring.any():
        return math.inf
    mu_t = image[disc].mean()
    vals = image[ring]
    sd = vals.std()
    if sd <= 1e-12 * max(1.0, abs(vals.mean())):
        log.warning("flat clutter ring around target at (%.1f, %.1f); SCR reported as inf", target.cy, target.cx)
        return math.inf
    return float((mu_t - vals.mean()) / sd)


def scene_scr(image, mask, targets) -> float:
    """Smallest per-target SCR of a scene (``nan`` without targets)."""
    if not targets:
        return math.nan
    return float(min(scr(image, t, mask, others=[o for o in targets if o is not t]) for t in targets))


def gen_scene(cfg: SceneConfig, seed: int | None = None, clamp: bool = True) -> Scene:
    seed = cfg.seed if seed is None else seed
    g_bg, g_t, g_n = _streams(seed)
    bg = gen_background(cfg.H, cfg.W, cfg.bg_rank, cfg.bg_smooth, g_bg)
    clean, mask, targets, tfield = place_targets(bg, cfg.n_targets, cfg.target_amp, cfg.target_sigma, cfg.mask_frac, g_t, clamp=clamp)
    image = add_noise(clean, cfg.noise_sigma, g_n, clamp=clamp)
    return Scene(image, mask, targets, scene_scr(image, mask, targets), cfg.noise_sigma, seed, cfg, bg, tfield)


def scene_seed(base: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([base, index, attempt]).generate_state(1, dtype=np.uint32)[0])


def gen_suite(cfg: SceneConfig, count: int, seed: int | None = None, min_scr: float | None = None, max_attempts: int = 500) -> list[Scene]:
    """``count`` independent scenes; with ``min_scr`` a scene is redrawn until
    all its targets reach that SCR."""
    base = cfg.seed if seed is None else seed
    scenes = []
    for i in range(count):
        for attempt in range(max_attempts):
            sc = gen_scene(cfg, scene_seed(base, i, attempt))
            if min_scr is None or not sc.targets or sc.scr >= min_scr:
                break
        else:
            raise RuntimeError(f"scene {i}: no draw reached SCR >= {min_scr} in {max_attempts} attempts")
        scenes.append(sc)
    return scenes


EASY_MIN_SCR = 3.0
EASY_SELECT_SIGMA = 10.0


def easy_suite(count: int, seed: int = 0, sigma_n: float = EASY_SELECT_SIGMA, cfg: SceneConfig | None = None, min_scr: float = EASY_MIN_SCR) -> list[Scene]:
    """Scenes whose targets all reach ``min_scr`` at the reference noise level.

    Selection always happens at ``sigma_n = 10``; the accepted seeds are then
    rendered at ``sigma_n``, so suites at different noise levels share
    backgrounds, targets and the underlying noise pattern.
    """
    cfg = cfg or SceneConfig()
    picked = gen_suite(with_noise(cfg, EASY_SELECT_SIGMA), count, seed=seed, min_scr=min_scr)
    if sigma_n == EASY_SELECT_SIGMA:
        return picked
    noisy = with_noise(cfg, sigma_n)
    return [gen_scene(noisy, sc.seed) for sc in picked]


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def _write_scene(out: Path, i: int, sc: Scene) -> dict:
    write_pgm(out / f"img_{i:05d}.pgm", to_uint8(sc.image))
    write_pgm(out / f"mask_{i:05d}.pgm", np.where(sc.mask, 255, 0).astype(np.uint8))
    return {
        "index": i,
        "image": f"img_{i:05d}.pgm",
        "mask": f"mask_{i:05d}.pgm",
        "seed": sc.seed,
        "scr": sc.scr,
        "targets": [asdict(t) for t in sc.targets],
    }


def gen_dataset(cfg: SceneConfig, count: int, out_dir, min_scr: float | None = None) -> dict:
    """Write ``img_%05d.pgm`` / ``mask_%05d.pgm`` pairs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = gen_suite(cfg, count, min_scr=min_scr)
    manifest = {"version": 1, "config": cfg.to_dict(), "count": count, "min_scr": min_scr, "scenes": []}
    for i, sc in enumerate(scenes):
        manifest["scenes"].append(_write_scene(out, i, sc))
    atomic_write_text(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def regenerate(manifest_path, out_dir) -> dict:
    """Rebuild a dataset from its manifest (per-scene seeds are stored)."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = SceneConfig(**manifest["config"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rebuilt = dict(manifest, scenes=[])
    for entry in manifest["scenes"]:
        sc = gen_scene(cfg, entry["seed"])
        rebuilt["scenes"].append(_write_scene(out, entry["index"], sc))
    atomic_write_text(out / MANIFEST, json.dumps(rebuilt, indent=2, sort_keys=True) + "\n")
    return rebuilt


def load_dataset(directory):
    """Return ``(images, masks, manifest)``; images in [0, 1] (grey / 255)."""
    directory = Path(directory)
    mpath = directory / MANIFEST
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        pairs = [(e["image"], e["mask"]) for e in manifest["scenes"]]
    else:
        manifest = None
        pairs = [(p.name, p.name.replace("img_", "mask_", 1)) for p in sorted(directory.glob("img_*.pgm"))]
    images = [load_image(directory / a) for a, _ in pairs]
    masks = [read_pgm(directory / b) > 127 for _, b in pairs]
    return images, masks, manifest


def with_noise(cfg: SceneConfig, sigma_n: float) -> SceneConfig:
    return replace(cfg, noise_sigma=float(sigma_n))
