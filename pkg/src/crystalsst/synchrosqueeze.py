"""Local wavevector estimation and energy reassignment on a spherical grid.

Spherical convention: ``xi = (v sin(theta) cos(psi), v sin(theta) sin(psi),
v cos(theta))`` with ``theta`` the polar angle from +xi_3.  Antipodal
vectors describe the same lattice planes, so every wavevector is folded to
the representative with ``xi_2 >= 0`` (ties: ``xi_3 >= 0``, then
``xi_1 >= 0``), which puts both angles in ``[0, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .wavepacket import CoefficientField, iter_transform


class AnalysisError(RuntimeError):
    """Raised when a stage has nothing to work with (e.g. no retained coefficients)."""


def fold_antipodal(vecs: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Antipodal representative; components below ``rtol * |v|`` count as zero in the tie rules."""
    vecs = np.asarray(vecs, dtype=float)
    tol = rtol * np.linalg.norm(vecs, axis=-1)
    x, y, z = vecs[..., 0], vecs[..., 1], vecs[..., 2]
    y0, z0 = np.abs(y) <= tol, np.abs(z) <= tol
    flip = (~y0 & (y < 0)) | (y0 & ((~z0 & (z < 0)) | (z0 & (x < 0))))
    return np.where(flip[..., None], -vecs, vecs)


def to_spherical(vecs: np.ndarray):
    """(v, psi, theta) of already folded Cartesian vectors."""
    vecs = np.asarray(vecs, dtype=float)
    v = np.linalg.norm(vecs, axis=-1)
    # arctan2 stays accurate near the poles, where arccos(z / v) does not
    theta = np.arctan2(np.hypot(vecs[..., 0], vecs[..., 1]), vecs[..., 2])
    # folded vectors have xi_2 >= 0 up to the fold tolerance
    psi = np.arctan2(np.maximum(vecs[..., 1], 0.0), vecs[..., 0])
    return v, psi, theta


def to_cartesian(v, psi, theta) -> np.ndarray:
    v, psi, theta = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (v, psi, theta)))
    st = np.sin(theta)
    return np.stack([v * st * np.cos(psi), v * st * np.sin(psi), v * np.cos(theta)], axis=-1)


@dataclass(frozen=True)
class SphericalGrid:
    """Cells centred at ``n * step`` in each of v, psi, theta."""

    v_range: tuple[float, float]
    dv: float = 1.0
    dpsi: float = math.pi / 60
    dtheta: float = math.pi / 60

    def __post_init__(self):
        if min(self.dv, self.dpsi, self.dtheta) <= 0:
            raise ValueError("grid steps must be positive")
        if not 0 <= self.v_range[0] < self.v_range[1]:
            raise ValueError(f"invalid v range {self.v_range}")

    @property
    def v_index_range(self) -> tuple[int, int]:
        return (int(math.floor(self.v_range[0] / self.dv + 0.5)),
                int(math.floor(self.v_range[1] / self.dv + 0.5)))

    @property
    def shape(self) -> tuple[int, int, int]:
        lo, hi = self.v_index_range
        return (hi - lo + 1,
                int(math.floor(math.pi / self.dpsi + 0.5)) + 1,
                int(math.floor(math.pi / self.dtheta + 0.5)) + 1)

    @property
    def n_cells(self) -> int:
        return math.prod(self.shape)

    def cell_index(self, v, psi, theta) -> np.ndarray:
        nv, npsi, nth = self.shape
        iv = np.floor(np.asarray(v) / self.dv + 0.5).astype(np.int64) - self.v_index_range[0]
        ip = np.clip(np.floor(np.asarray(psi) / self.dpsi + 0.5).astype(np.int64), 0, npsi - 1)
        it = np.clip(np.floor(np.asarray(theta) / self.dtheta + 0.5).astype(np.int64), 0, nth - 1)
        iv = np.clip(iv, 0, nv - 1)
        return (iv * npsi + ip) * nth + it

    def cell_spherical(self, cells) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nv, npsi, nth = self.shape
        cells = np.asarray(cells, dtype=np.int64)
        it = cells % nth
        ip = (cells // nth) % npsi
        iv = cells // (nth * npsi)
        return ((iv + self.v_index_range[0]) * self.dv, ip * self.dpsi, it * self.dtheta)

    def cell_cartesian(self, cells) -> np.ndarray:
        return to_cartesian(*self.cell_spherical(cells))


@dataclass(eq=False)
class WavevectorField:
    """Retained (atom, b) entries with their wavevector estimates and weights |W|^2."""

    atom: np.ndarray        # (n,) atom index
    b: np.ndarray           # (n,) flat index into the L_B^3 grid
    v: np.ndarray           # (n, 3) Re v_f, cycles per unit length
    weight: np.ndarray      # (n,) |W_f(a, b)|^2
    lb: int
    n_atoms: int
    threshold: float

    def retained_energy(self) -> float:
        return float(np.sum(self.weight))

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n_atoms, self.lb**3), dtype=bool)
        out[self.atom, self.b] = True
        return out.reshape((self.n_atoms,) + (self.lb,) * 3)


def local_wavevectors(coeffs: CoefficientField, eps_rel: float = 0.1) -> WavevectorField:
    """v_f = Re(grad_b W / (2 pi i W)) on {|W| >= eps_rel * max|W|}."""
    if coeffs.grad is None:
        raise ValueError("coefficient field has no gradients; use gradient_transform")
    if not 0 < eps_rel < 1:
        raise ValueError(f"eps_rel must lie in (0, 1), got {eps_rel}")
    n_atoms, lb = coeffs.W.shape[0], coeffs.lb
    absW = np.abs(coeffs.W).reshape(n_atoms, -1)
    top = float(absW.max()) if absW.size else 0.0
    if top <= 0:
        raise AnalysisError("no coefficient is retained: the transform vanishes identically")
    thr = eps_rel * top
    atom, b = np.nonzero(absW >= thr)
    W = coeffs.W.reshape(n_atoms, -1)[atom, b]
    grad = coeffs.grad.reshape(n_atoms, 3, -1)[atom, :, b]
    v = np.real(grad / (2j * np.pi * W[:, None]))
    return WavevectorField(atom=atom, b=b, v=v, weight=np.abs(W) ** 2, lb=lb,
                           n_atoms=n_atoms, threshold=thr)


def atom_noise_levels(atlas, sigma: float) -> np.ndarray:
    """Standard deviation of |W_f(a, b)| for white noise of per-mode deviation ``sigma``."""
    return np.array([sigma * np.sqrt(np.sum(a.window**2)) / atlas.lb**1.5 for a in atlas.atoms])


def streaming_wavevectors(spec, atlas, eps_rel: float = 0.1, batch: int = 32,
                          workers: int | None = None, noise_sigma: float = 0.0,
                          kappa: float = 3.0, debias: bool = False) -> WavevectorField:
    """Same result as ``local_wavevectors(gradient_transform(...))`` in bounded memory.

    A first pass finds max|W|; the second recomputes W with its gradient per
    batch of atoms and keeps only the retained entries.  With a positive
    ``noise_sigma`` an entry must also exceed ``kappa`` times the noise level
    of its atom, and ``debias`` replaces the weight |W|^2 by
    max(|W|^2 - noise level^2, 0), removing the mean noise energy.
    """
    if not 0 < eps_rel < 1:
        raise ValueError(f"eps_rel must lie in (0, 1), got {eps_rel}")
    top = 0.0
    for _, W, _ in iter_transform(spec, atlas, gradient=False, batch=batch, workers=workers):
        top = max(top, float(np.abs(W).max()) if W.size else 0.0)
    if top <= 0:
        raise AnalysisError("no coefficient is retained: the transform vanishes identically")
    thr = eps_rel * top
    level = atom_noise_levels(atlas, noise_sigma) if noise_sigma > 0 else np.zeros(len(atlas))
    floor = kappa * level
    parts = []
    for sl, W, grad in iter_transform(spec, atlas, gradient=True, batch=batch, workers=workers):
        nb = W.shape[0]
        W = W.reshape(nb, -1)
        atom, b = np.nonzero(np.abs(W) >= np.maximum(thr, floor[sl])[:, None])
        w = W[atom, b]
        g = grad.reshape(nb, 3, -1)[atom, :, b]
        weight = np.abs(w) ** 2
        if debias:
            weight = np.maximum(weight - level[sl][atom] ** 2, 0.0)
        parts.append((atom + sl.start, b, np.real(g / (2j * np.pi * w[:, None])), weight))
    atom, b, v, weight = (np.concatenate([p[k] for p in parts]) for k in range(4))
    return WavevectorField(atom=atom, b=b, v=v.reshape(-1, 3), weight=weight, lb=atlas.lb,
                           n_atoms=len(atlas), threshold=thr)


@dataclass(eq=False)
class SqueezeTensor:
    """Sparse T_f: per-(b, cell) energy, sorted by b then cell.

    ``moment`` holds the energy-weighted sum of the folded wavevectors that
    landed in each cell, so cell centroids are available without the grid
    quantisation.
    """

    grid: SphericalGrid
    lb: int
    b: np.ndarray
    cell: np.ndarray
    energy: np.ndarray
    moment: np.ndarray

    def total_energy(self) -> float:
        return float(np.sum(self.energy))

    def b_offsets(self) -> np.ndarray:
        """CSR-style offsets: entries of voxel i live in [off[i], off[i+1])."""
        counts = np.bincount(self.b, minlength=self.lb**3)
        return np.concatenate([[0], np.cumsum(counts)])

    def energy_per_b(self) -> np.ndarray:
        return np.bincount(self.b, weights=self.energy,
                           minlength=self.lb**3).reshape((self.lb,) * 3)

    def at(self, b_flat: int):
        off = self.b_offsets()
        sl = slice(off[b_flat], off[b_flat + 1])
        return self.cell[sl], self.energy[sl], self.moment[sl]

    def energy_map(self, b_flat: int, v_value: float | None = None) -> np.ndarray:
        """Dense (psi, theta) energy at one voxel, summed over v or at the v cell of ``v_value``."""
        nv, npsi, nth = self.grid.shape
        cells, e, _ = self.at(b_flat)
        dense = np.zeros((nv, npsi, nth))
        np.add.at(dense.reshape(-1), cells, e)
        if v_value is None:
            return dense.sum(axis=0)
        iv = int(math.floor(v_value / self.grid.dv + 0.5)) - self.grid.v_index_range[0]
        return dense[np.clip(iv, 0, nv - 1)]


def squeeze(field: WavevectorField, grid: SphericalGrid) -> SqueezeTensor:
    """Accumulate |W|^2 of each retained entry in the cell containing its folded Re v_f."""
    folded = fold_antipodal(field.v)
    v, psi, theta = to_spherical(folded)
    keep = (v >= grid.v_range[0]) & (v <= grid.v_range[1])
    cells = grid.cell_index(v[keep], psi[keep], theta[keep])
    b = field.b[keep]
    w = field.weight[keep]
    key = b.astype(np.int64) * grid.n_cells + cells
    uniq, inv = np.unique(key, return_inverse=True)
    energy = np.bincount(inv, weights=w, minlength=uniq.size)
    moment = np.stack([np.bincount(inv, weights=w * folded[keep, j], minlength=uniq.size)
                       for j in range(3)], axis=1)
    return SqueezeTensor(grid=grid, lb=field.lb, b=uniq // grid.n_cells,
                         cell=uniq % grid.n_cells, energy=energy, moment=moment)
