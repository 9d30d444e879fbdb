"""Patch-image low-rank baseline: patch-images, RPCA by inexact ALM, fold-back.

The patch-image of an ``H x W`` image stacks every ``p x p`` window at
stride ``s`` as a column. Its background part is approximately low rank,
so robust PCA splits it into a low-rank ``B`` and a sparse ``T`` that holds
small targets.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


class UncoveredPixelsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PatchConfig:
    patch: int = 50
    stride: int = 10

    def check(self, h: int, w: int):
        if not 0 < self.stride <= self.patch:
            raise ValueError(f"need 0 < stride <= patch, got stride={self.stride}, patch={self.patch}")
        if self.patch > min(h, w):
            raise ValueError(f"patch {self.patch} larger than image {h}x{w}")

    def grid(self, h: int, w: int) -> tuple[int, int]:
        return (h - self.patch) // self.stride + 1, (w - self.patch) // self.stride + 1


def build_patch_image(img, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """``p*p x n`` matrix of row-major vectorised patches, columns in raster order of offsets."""
    img = np.asarray(img, dtype=np.float64)
    cfg.check(*img.shape)
    return kernels.patch_build(img, cfg.patch, cfg.stride)


def coverage(h: int, w: int, cfg: PatchConfig) -> np.ndarray:
    ni, nj = cfg.grid(h, w)
    rows = np.zeros(h, dtype=np.int64)
    cols = np.zeros(w, dtype=np.int64)
    for i in range(ni):
        rows[i * cfg.stride : i * cfg.stride + cfg.patch] += 1
    for j in range(nj):
        cols[j * cfg.stride : j * cfg.stride + cfg.patch] += 1
    return rows[:, None] * cols[None, :]


def fold_patch_image(m, h: int, w: int, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Average overlapping patch contributions back into an ``h x w`` image.

    Pixels no patch covers are set to 0 and reported with
    :class:`UncoveredPixelsWarning`.
    """
    cfg.check(h, w)
    m = np.asarray(m, dtype=np.float64)
    ni, nj = cfg.grid(h, w)
    if m.shape != (cfg.patch**2, ni * nj):
        raise ValueError(f"patch-image shape {m.shape} does not match {h}x{w} with {cfg}; expected {(cfg.patch**2, ni * nj)}")
    acc, cnt = kernels.patch_fold(m, h, w, cfg.patch, cfg.stride)
    out = np.zeros((h, w))
    covered = cnt > 0
    out[covered] = acc[covered] / cnt[covered]
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} pixels not covered by any patch were set to 0", UncoveredPixelsWarning, stacklevel=2)
    return out


def svt(m, tau: float) -> np.ndarray:
    """Singular value thresholding, the proximal map of ``tau * ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"SVD failed on a {np.shape(m)} matrix: {exc}") from exc
    s = np.maximum(s - tau, 0.0)
    r = int(np.count_nonzero(s))
    return (u[:, :r] * s[:r]) @ vt[:r]


def soft_threshold(m, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    m = np.asarray(m, dtype=np.float64)
    return np.sign(m) * np.maximum(np.abs(m) - tau, 0.0)


@dataclass
class RpcaResult:
    B: np.ndarray
    T: np.ndarray
    iterations: int
    residual: float
    rank: int
    nnz: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def stats(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "rank": self.rank,
            "nnz": self.nnz,
            "converged": self.converged,
            "shape": list(self.B.shape),
        }


def rpca_objective(b, t, lam: float) -> float:
    return float(np.linalg.svd(b, compute_uv=False).sum() + lam * np.abs(t).sum())


def rpca_ialm(d, lam: float | None = None, tol: float = 1e-7, max_iter: int = 500, rho: float = 1.5, mu0: float | None = None, mu_max_factor: float = 1e7) -> RpcaResult:
    """Robust PCA ``min ||B||_* + lam ||T||_1  s.t.  D = B + T`` by inexact ALM.

    ``mu0`` defaults to ``1.25 / ||D||_2`` and grows by ``rho`` each
    iteration up to ``mu0 * mu_max_factor``. The multiplier starts at
    ``D / max(||D||_2, ||D||_inf / lam)``. Stops once
    ``||D - B - T||_F / ||D||_F < tol``; otherwise returns the iterate with
    the lowest residual and ``converged=False``.
    """
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("rpca_ialm needs a finite matrix")
    m, n = d.shape
    lam = 1.0 / np.sqrt(max(m, n)) if lam is None else float(lam)
    norm_fro = np.linalg.norm(d)
    if norm_fro == 0:
        z = np.zeros_like(d)
        return RpcaResult(z, z.copy(), 0, 0.0, 0, 0, True, [0.0])
    norm_two = np.linalg.norm(d, 2)
    y = d / max(norm_two, np.abs(d).max() / lam)
    mu = 1.25 / norm_two if mu0 is None else float(mu0)
    mu_max = mu * mu_max_factor
    b = np.zeros_like(d)
    t = np.zeros_like(d)
    history = []
    best = None
    for it in range(1, max_iter + 1):
        b = svt(d - t + y / mu, 1.0 / mu)
        t = soft_threshold(d - b + y / mu, lam / mu)
        r = d - b - t
        res = float(np.linalg.norm(r) / norm_fro)
        history.append(res)
        if best is None or res < best[0]:
            best = (res, b, t, it)
        y = y + mu * r
        mu = min(rho * mu, mu_max)
        if res < tol:
            return RpcaResult(b, t, it, res, int(np.linalg.matrix_rank(b)), int(np.count_nonzero(t)), True, history)
    res, b, t, it = best
    log.info("rpca_ialm stopped after %d iterations with residual %.3e", max_iter, res)
    return RpcaResult(b, t, max_iter, res, int(np.linalg.matrix_rank(b)), int(np.count_nonzero(t)), False, history)


def singular_spectrum(img, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Singular values of the patch-image in descending order, divided by the largest."""
    s = np.linalg.svd(build_patch_image(img, cfg), compute_uv=False)
    return s / s[0] if s[0] > 0 else s


def energy_rank(sv, fraction: float = 0.99) -> int:
    """Smallest k whose leading singular values hold ``fraction`` of the energy (sum of squares)."""
    e = np.cumsum(np.asarray(sv, dtype=np.float64) ** 2)
    return int(np.searchsorted(e, fraction * e[-1] * (1 - 1e-12)) + 1)


def rpca_detect(img, pcfg: PatchConfig = PatchConfig(), tau_rel: float = 0.1, lam: float | None = None, tol: float = 1e-7, max_iter: int = 500):
    """Training-free detector: patch-image, RPCA, fold ``T`` back, clamp, normalise.

    The map is divided by ``max(max T, tau_rel * dynamic range of img)`` so
    a target-free image does not have its residue stretched to 1.
    Returns ``(confidence, RpcaResult)``.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    d = build_patch_image(img, pcfg)
    log.info("patch-image shape %dx%d", *d.shape)
    res = rpca_ialm(d, lam=lam, tol=tol, max_iter=max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UncoveredPixelsWarning)
        t_img = np.maximum(fold_patch_image(res.T, h, w, pcfg), 0.0)
    top = float(t_img.max())
    denom = max(top, tau_rel * float(img.max() - img.min()))
    conf = t_img / denom if denom > 0 else np.zeros_like(t_img)
    return np.clip(conf, 0.0, 1.0), res
