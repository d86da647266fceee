"""Sparse-plus-low-rank decomposition of interfered images.

An interfered image is split as I ~ X + C by minimizing

    0.5 * ||I - C - X||_F^2  +  rho * ||C||_*  +  mu * ||X||_1

with cyclic coordinate descent: the X step is entrywise complex soft
thresholding, the C step is singular value thresholding.  Point-like
targets end up in the sparse part X, comb-pattern interference (stripes,
plates) in the low-rank part C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ComplexImage, ImageGrid


@dataclass
class SolverConfig:
    """Weights, step sizes and stopping rule for the decomposition."""

    mu: float | None = None  # sparsity weight; None -> derived when auto_weights
    rho: float | None = None  # low-rank weight; None -> derived when auto_weights
    alpha: float = 1.0  # sparse-step size in (0, 1]
    beta: float = 1.0  # low-rank-step size in (0, 1]
    max_iter: int = 500
    tol: float = 1e-6  # relative iterate-change stopping threshold
    auto_weights: bool = True
    per_slice_3d: bool = False  # decompose each height slice separately

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0) or not (0.0 < self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be >= 0")


@dataclass
class DecompositionResult:
    """Recovered sparse target part X and low-rank interference part C."""

    target: np.ndarray
    interference: np.ndarray
    objective_trace: list[float]
    iterations_run: int
    converged: bool
    mu: float
    rho: float
    residual_norm: float  # ||I - X - C||_F at exit


def objective(interfered, target, interference, mu: float, rho: float) -> float:
    """0.5*||I - C - X||_F^2 + rho*||C||_* + mu*||X||_1 for complex matrices."""
    i_mat = np.asarray(interfered)
    x_mat = np.asarray(target)
    c_mat = np.asarray(interference)
    if not (i_mat.shape == x_mat.shape == c_mat.shape):
        raise ValueError("objective requires matching matrix dimensions")
    resid = 0.5 * np.linalg.norm(i_mat - c_mat - x_mat) ** 2
    nuclear = np.sum(np.linalg.svd(c_mat, compute_uv=False))
    l1 = np.sum(np.abs(x_mat))
    return float(resid + rho * nuclear + mu * l1)


def soft_threshold_entries(matrix, threshold: float) -> np.ndarray:
    """Complex entrywise shrinkage v -> (v/|v|) * max(|v| - threshold, 0)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    m = np.asarray(matrix, dtype=np.complex128)
    mag = np.abs(m)
    safe = np.where(mag > 0, mag, 1.0)
    return (m / safe) * np.maximum(mag - threshold, 0.0)


def update_target(target_prev, interference_prev, interfered, alpha: float, mu: float) -> np.ndarray:
    """Sparse-part step: shrink X + alpha*(I - C - X) by alpha*mu.

    With alpha = 1 this is the exact proximal map of mu*||.||_1 at I - C.
    """
    x = np.asarray(target_prev)
    c = np.asarray(interference_prev)
    i_mat = np.asarray(interfered)
    if not (x.shape == c.shape == i_mat.shape):
        raise ValueError("update_target requires matching matrix dimensions")
    return soft_threshold_entries(x + alpha * (i_mat - c - x), alpha * mu)


def singular_value_threshold(matrix, threshold: float) -> np.ndarray:
    """Shrink the singular values of a complex matrix by threshold.

    Computes the thin SVD, replaces each singular value s with
    max(s - threshold, 0) and reconstructs; this is the proximal map of the
    nuclear norm.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    m = np.asarray(matrix, dtype=np.complex128)
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"SVD failed to converge on a {m.shape[0]}x{m.shape[1]} matrix: {exc}"
        ) from exc
    return (u * np.maximum(s - threshold, 0.0)) @ vh


def update_interference(interference_prev, target_new, interfered, beta: float, rho: float) -> np.ndarray:
    """Low-rank-part step: singular-value-shrink C + beta*(I - C - X) by beta*rho."""
    c = np.asarray(interference_prev)
    x = np.asarray(target_new)
    i_mat = np.asarray(interfered)
    if not (x.shape == c.shape == i_mat.shape):
        raise ValueError("update_interference requires matching matrix dimensions")
    return singular_value_threshold(c + beta * (i_mat - c - x), beta * rho)


def default_params(interfered) -> tuple[float, float]:
    """Input-scaled weights: rho = sigma_1/4, mu = rho/sqrt(max dimension)."""
    i_mat = np.asarray(interfered)
    if not np.any(i_mat):
        raise ValueError("default_params requires a non-zero input")
    sigma1 = float(np.linalg.svd(i_mat, compute_uv=False)[0])
    rho = sigma1 / 4.0
    mu = rho / np.sqrt(max(i_mat.shape))
    return mu, rho


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    diff = float(np.linalg.norm(new - old))
    base = float(np.linalg.norm(new))
    if base == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return diff / base


def decompose(
    interfered,
    config: SolverConfig | None = None,
    x0=None,
    c0=None,
) -> DecompositionResult:
    """Run the alternating proximal iteration from X = C = 0 (or given starts).

    Stops when the relative change of both iterates drops below config.tol
    or after config.max_iter iterations.  With alpha = beta = 1 each step is
    an exact coordinate minimization, so the objective trace never increases.
    """
    cfg = config if config is not None else SolverConfig()
    i_mat = np.asarray(interfered, dtype=np.complex128)
    if i_mat.ndim != 2:
        raise ValueError("decompose expects a 2D matrix; unfold volumes first")
    if not np.all(np.isfinite(i_mat.real)) or not np.all(np.isfinite(i_mat.imag)):
        raise ValueError("decompose requires finite input")

    if cfg.mu is not None and cfg.rho is not None:
        mu, rho = cfg.mu, cfg.rho
    elif cfg.auto_weights:
        auto_mu, auto_rho = default_params(i_mat) if np.any(i_mat) else (0.0, 0.0)
        mu = cfg.mu if cfg.mu is not None else auto_mu
        rho = cfg.rho if cfg.rho is not None else auto_rho
    else:
        raise ValueError("mu and rho must be set when auto_weights is off")

    x = np.zeros_like(i_mat) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    c = np.zeros_like(i_mat) if c0 is None else np.asarray(c0, dtype=np.complex128).copy()
    if x.shape != i_mat.shape or c.shape != i_mat.shape:
        raise ValueError("initial iterates must match the input dimensions")

    trace: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        x_new = update_target(x, c, i_mat, cfg.alpha, mu)
        c_new = update_interference(c, x_new, i_mat, cfg.beta, rho)
        if not (np.all(np.isfinite(x_new.real)) and np.all(np.isfinite(c_new.real))
                and np.all(np.isfinite(x_new.imag)) and np.all(np.isfinite(c_new.imag))):
            raise RuntimeError(f"non-finite iterate at iteration {iterations}")
        trace.append(objective(i_mat, x_new, c_new, mu, rho))
        change = max(_relative_change(x_new, x), _relative_change(c_new, c))
        x, c = x_new, c_new
        if change < cfg.tol:
            converged = True
            break

    residual = float(np.linalg.norm(i_mat - x - c))
    return DecompositionResult(
        target=x,
        interference=c,
        objective_trace=trace,
        iterations_run=iterations,
        converged=converged,
        mu=float(mu),
        rho=float(rho),
        residual_norm=residual,
    )


def matricize_3d(volume: ComplexImage) -> np.ndarray:
    """Unfold a (range, azimuth, height) volume into a range-by-rest matrix.

    Row p holds voxel (p, q, o) at column q + azimuth_count * o.  Plates that
    are constant over azimuth and height at fixed range unfold to near
    rank-one matrices, which is what the low-rank penalty exploits.
    """
    if volume.grid.ndim != 3:
        raise ValueError("matricize_3d expects a 3D volume")
    p, q, o = volume.values.shape
    return volume.values.transpose(0, 2, 1).reshape(p, q * o)


def dematricize_3d(matrix, grid: ImageGrid) -> ComplexImage:
    """Exact inverse of matricize_3d for the given 3D grid."""
    if grid.ndim != 3:
        raise ValueError("dematricize_3d expects a 3D grid")
    p, q, o = grid.shape
    m = np.asarray(matrix, dtype=np.complex128)
    if m.shape != (p, q * o):
        raise ValueError(f"matrix shape {m.shape} does not match grid {grid.shape}")
    return ComplexImage(m.reshape(p, o, q).transpose(0, 2, 1), grid)


def decompose_volume(
    volume: ComplexImage,
    config: SolverConfig | None = None,
) -> tuple[ComplexImage, ComplexImage, list[DecompositionResult]]:
    """Decompose a 3D volume, whole (mode-1 unfolding) or per height slice."""
    cfg = config if config is not None else SolverConfig()
    if volume.grid.ndim != 3:
        raise ValueError("decompose_volume expects a 3D volume")
    if cfg.per_slice_3d:
        x_vol = np.zeros_like(volume.values)
        c_vol = np.zeros_like(volume.values)
        results = []
        for o in range(volume.grid.height.count):
            res = decompose(volume.values[:, :, o], cfg)
            x_vol[:, :, o] = res.target
            c_vol[:, :, o] = res.interference
            results.append(res)
        return (
            ComplexImage(x_vol, volume.grid),
            ComplexImage(c_vol, volume.grid),
            results,
        )
    res = decompose(matricize_3d(volume), cfg)
    return (
        dematricize_3d(res.target, volume.grid),
        dematricize_3d(res.interference, volume.grid),
        [res],
    )
