"""Band-limited wave packet atlas and its FFT-based transforms.

Atoms sit on a Cartesian lattice of pitch ``P = L_a / 2`` in the Fourier
domain.  Each window is a tensor product of 1D profiles
``w(t) = cos(pi/2 * nu(|t|))`` with ``t = (xi - c) / P`` and the Meyer
polynomial ``nu``, supported on ``|t| < 1``; since ``nu(t) + nu(1 - t) = 1``
the squared windows of a full lattice sum to one.  When the band spans
several box sizes it is cut into radial shells, and windows of shell ``k``
are multiplied by a radial factor ``rho_k(|xi|)`` whose squares also sum to
one across shells.

Only atoms with ``a_1 >= 0`` are kept; for a real image the coefficients at
``-a`` are the complex conjugates of those at ``a``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .spectrum import Band, SpectralVolume


def meyer_nu(x):
    x = np.clip(x, 0.0, 1.0)
    return x**4 * (35 - 84 * x + 70 * x**2 - 20 * x**3)


def window_profile(t):
    """1D lattice window: squares of integer shifts sum to 1."""
    t = np.abs(np.asarray(t, dtype=float))
    return np.where(t < 1.0, np.cos(0.5 * np.pi * meyer_nu(t)), 0.0)


def box_side(r, s: float, c_w: float) -> int:
    """L_a = c_w |a|^s rounded to the nearest even integer (at least 2)."""
    return max(2, 2 * int(math.floor(c_w * float(r) ** s / 2.0 + 0.5)))


@dataclass(frozen=True)
class Shell:
    lo: float           # radial range assigned to this box size
    hi: float
    side: int           # L_a
    h_lo: float = 0.0   # half-width of the radial transition at lo (0: none)
    h_hi: float = 0.0

    @property
    def pitch(self) -> int:
        return self.side // 2

    def radial_weight(self, r):
        r = np.asarray(r, dtype=float)
        out = np.ones_like(r)
        if self.h_lo > 0:
            u = (r - (self.lo - self.h_lo)) / (2 * self.h_lo)
            out = out * np.where(u <= 0, 0.0, np.sin(0.5 * np.pi * meyer_nu(u)))
        if self.h_hi > 0:
            u = (r - (self.hi - self.h_hi)) / (2 * self.h_hi)
            out = out * np.where(u >= 1, 0.0, np.cos(0.5 * np.pi * meyer_nu(u)))
        return out


@dataclass(frozen=True, eq=False)
class Atom:
    center: np.ndarray          # a, integer lattice point times pitch
    side: int                   # L_a
    shell: int
    support: tuple              # three int arrays: xi values along each axis
    window: np.ndarray          # g_a on the support grid

    @property
    def corner(self) -> np.ndarray:
        return self.center - self.side / 2


@dataclass(eq=False)
class WavePacketAtlas:
    L: int
    band: tuple[float, float]
    s: float
    c_w: float
    lb: int
    shells: list[Shell]
    atoms: list[Atom] = field(repr=False)

    def __len__(self):
        return len(self.atoms)

    @property
    def centers(self) -> np.ndarray:
        return np.array([a.center for a in self.atoms], dtype=float).reshape(-1, 3)

    @property
    def sides(self) -> np.ndarray:
        return np.array([a.side for a in self.atoms], dtype=int)

    def window_on_grid(self, i: int) -> np.ndarray:
        """Dense g_a over the full L^3 Fourier grid (numpy FFT order)."""
        out = np.zeros((self.L,) * 3)
        atom = self.atoms[i]
        out[np.ix_(*(x % self.L for x in atom.support))] = atom.window
        return out

    def partition_sum(self) -> np.ndarray:
        """Sum over stored atoms of g_a(xi)^2 on the full grid."""
        out = np.zeros((self.L,) * 3)
        for atom in self.atoms:
            out[np.ix_(*(x % self.L for x in atom.support))] += atom.window**2
        return out

    def to_json(self, with_windows: bool = False) -> str:
        doc = {
            "L": self.L, "band": list(self.band), "s": self.s, "c_w": self.c_w,
            "L_B": self.lb,
            "shells": [vars(sh) for sh in self.shells],
            "atoms": [],
        }
        for a in self.atoms:
            item = {"center": a.center.tolist(), "corner": a.corner.tolist(),
                    "side": a.side, "shell": a.shell}
            if with_windows:
                item["support"] = [x.tolist() for x in a.support]
                item["window"] = a.window.tolist()
            doc["atoms"].append(item)
        return json.dumps(doc)


def _shells_for_band(r1: float, r2: float, s: float, c_w: float) -> list[Shell]:
    # level sets of box_side over [r1, r2]
    cuts = []
    side = box_side(max(r1, 1.0), s, c_w)
    start = r1
    while True:
        # box_side switches to side + 2 where c_w r^s crosses side + 1
        nxt = ((side + 1) / c_w) ** (1.0 / s)
        if nxt >= r2:
            cuts.append([start, r2, side])
            break
        cuts.append([start, nxt, side])
        start, side = nxt, side + 2
    # merge shells too thin to host a radial transition into their wider neighbour
    merged = [list(c) for c in cuts]
    while len(merged) > 1:
        widths = [hi - lo for lo, hi, _ in merged]
        thin = [k for k, (lo, hi, side) in enumerate(merged) if hi - lo < 0.5 * side]
        if not thin:
            break
        k = thin[0]
        nbrs = [j for j in (k - 1, k + 1) if 0 <= j < len(merged)]
        j = max(nbrs, key=lambda q: widths[q])
        lo = min(merged[k][0], merged[j][0])
        hi = max(merged[k][1], merged[j][1])
        merged[min(j, k)] = [lo, hi, merged[j][2]]
        del merged[max(j, k)]
    shells = []
    for k, (lo, hi, side) in enumerate(merged):
        h_lo = h_hi = 0.0
        if k > 0:
            h_lo = 0.25 * min(side, merged[k - 1][2])
        if k + 1 < len(merged):
            h_hi = 0.25 * min(side, merged[k + 1][2])
        shells.append(Shell(lo=float(lo), hi=float(hi), side=int(side), h_lo=h_lo, h_hi=h_hi))
    return shells


def default_lb(max_side: int) -> int:
    """Smallest power of two >= 2 max L_a."""
    return 1 << int(math.ceil(math.log2(2 * max_side)))


def build_atlas(L: int, band, s: float = 0.5, c_w: float = 2.0,
                lb: int | None = None) -> WavePacketAtlas:
    """Tile the half annulus r1 <= |xi| <= r2, xi_1 >= 0 with wave packet windows."""
    r1, r2 = (band.r1, band.r2) if isinstance(band, Band) else map(float, band)
    if not 0.5 <= s <= 1.0:
        raise ValueError(f"s must lie in [1/2, 1], got {s}")
    if not 0 < r1 < r2:
        raise ValueError(f"invalid band [{r1}, {r2}]")
    if r2 > math.sqrt(3) * L / 2:
        raise ValueError(f"band [{r1}, {r2}] exceeds the Fourier grid of size {L}")
    shells = _shells_for_band(r1, r2, s, c_w)
    max_side = max(sh.side for sh in shells)
    if max_side >= L:
        raise ValueError(f"box size {max_side} does not fit the grid of size {L}; band too wide")
    lb = default_lb(max_side) if lb is None else int(lb)
    if lb < max_side:
        raise ValueError(f"L_B={lb} is smaller than the largest box {max_side}")

    lo_freq, hi_freq = -(L // 2), L - L // 2 - 1
    atoms: list[Atom] = []
    for k, sh in enumerate(shells):
        P = sh.pitch
        rad_lo = sh.lo - sh.h_lo if sh.h_lo else r1
        rad_hi = sh.hi + sh.h_hi if sh.h_hi else r2
        rad_lo, rad_hi = max(rad_lo, r1), min(rad_hi, r2)
        mmax = int(math.ceil((rad_hi + P) / P))
        m1 = np.arange(0, mmax + 1)
        m23 = np.arange(-mmax, mmax + 1)
        for i in m1:
            for j in m23:
                for l in m23:
                    c = np.array([i, j, l]) * P
                    # nearest point of the open box to the origin, farthest corner
                    near = np.maximum(np.abs(c) - P, 0.0)
                    if np.linalg.norm(near) >= rad_hi or np.linalg.norm(np.abs(c) + P) <= rad_lo:
                        continue
                    support = tuple(
                        np.arange(max(cj - P + 1, lo_freq), min(cj + P - 1, hi_freq) + 1)
                        for cj in c
                    )
                    if any(x.size == 0 for x in support):
                        continue
                    X1, X2, X3 = np.meshgrid(*support, indexing="ij")
                    rr = np.sqrt(X1**2 + X2**2 + X3**2)
                    g = (window_profile((support[0] - c[0]) / P)[:, None, None]
                         * window_profile((support[1] - c[1]) / P)[None, :, None]
                         * window_profile((support[2] - c[2]) / P)[None, None, :])
                    if len(shells) > 1:
                        g = g * sh.radial_weight(rr)
                    hit = (g > 0) & (rr >= r1) & (rr <= r2) & (X1 >= 0)
                    if not np.any(hit):
                        continue
                    atoms.append(Atom(center=c.astype(float), side=sh.side, shell=k,
                                      support=support, window=g))
    return WavePacketAtlas(L=L, band=(r1, r2), s=s, c_w=c_w, lb=lb, shells=shells, atoms=atoms)


@dataclass(eq=False)
class CoefficientField:
    """W_f(a, b) (atom-major, each an L_B^3 block) and optionally grad_b W_f."""

    atlas: WavePacketAtlas
    W: np.ndarray                       # (n_atoms, LB, LB, LB) complex
    grad: np.ndarray | None = None      # (n_atoms, 3, LB, LB, LB) complex

    @property
    def lb(self) -> int:
        return self.atlas.lb


def iter_transform(spec: SpectralVolume, atlas: WavePacketAtlas, gradient: bool = True,
                   batch: int = 32, workers: int | None = None):
    """Yield ``(slice, W, grad)`` per batch of atoms without keeping the whole field."""
    L = atlas.L
    if spec.dims != (L, L, L):
        raise ValueError(f"spectrum dims {spec.dims} do not match atlas grid {L}")
    lb = atlas.lb
    fh = spec.data
    n = len(atlas.atoms)
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        nb = stop - start
        buf = np.zeros((nb, 4 if gradient else 1, lb, lb, lb), dtype=np.complex128)
        for t, atom in enumerate(atlas.atoms[start:stop]):
            s1, s2, s3 = atom.support
            vals = fh[np.ix_(s1 % L, s2 % L, s3 % L)] * atom.window
            pos = np.ix_(s1 % lb, s2 % lb, s3 % lb)
            buf[t, 0][pos] = vals
            if gradient:
                buf[t, 1][pos] = (2j * np.pi) * s1[:, None, None] * vals
                buf[t, 2][pos] = (2j * np.pi) * s2[None, :, None] * vals
                buf[t, 3][pos] = (2j * np.pi) * s3[None, None, :] * vals
        out = scipy.fft.ifftn(buf, axes=(2, 3, 4), norm="ortho", workers=workers,
                              overwrite_x=True)
        yield slice(start, stop), out[:, 0], (out[:, 1:] if gradient else None)


def forward_transform(spec: SpectralVolume, atlas: WavePacketAtlas,
                      workers: int | None = None) -> CoefficientField:
    """W_f(a, b) = L_B^{-3/2} sum_xi exp(2 pi i b.xi) g_a(xi) f_hat(xi) for b on the L_B grid."""
    lb = atlas.lb
    W = np.empty((len(atlas), lb, lb, lb), dtype=np.complex128)
    for sl, w, _ in iter_transform(spec, atlas, gradient=False, workers=workers):
        W[sl] = w
    return CoefficientField(atlas=atlas, W=W)


def gradient_transform(spec: SpectralVolume, atlas: WavePacketAtlas,
                       workers: int | None = None) -> CoefficientField:
    """As :func:`forward_transform`, plus grad_b W_f from the multiplier 2 pi i xi."""
    lb = atlas.lb
    W = np.empty((len(atlas), lb, lb, lb), dtype=np.complex128)
    G = np.empty((len(atlas), 3, lb, lb, lb), dtype=np.complex128)
    for sl, w, g in iter_transform(spec, atlas, gradient=True, workers=workers):
        W[sl] = w
        G[sl] = g
    return CoefficientField(atlas=atlas, W=W, grad=G)
