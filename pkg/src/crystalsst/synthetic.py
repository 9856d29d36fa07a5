"""Synthetic polycrystal volumes with ground truth.

Each grain k renders ``alpha(x) * S(N * phi_k(x)) + c(x)`` where ``S`` is a
mean-free sum of Gaussian atom bumps on the reference lattice (period 1 in
reference units) and ``phi_k(x) = M_k^T x + w_k(x)``.  ``M_k = R_k U_k`` is
the lattice rotation times an optional stretch, ``w_k`` an optional smooth
periodic warp.  The local wavevector belonging to a reference reciprocal
vector ``n`` is then ``N * G(x) n`` with ``G = M_k + (grad w_k)^T``; this
``G`` is what :mod:`crystalsst.analysis` recovers and what
:class:`GroundTruth` stores.

Grains are periodic Voronoi cells.  Coordinates inside a grain are taken as
the minimal image around its seed, so the only place a grain meets itself
is on the far side of the torus; if the lattice is not commensurate with
the unit cube there, the seam is a real lattice discontinuity and is
recorded in the ground-truth defect mask.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .volume_io import ScalarVolume, VolumeMeta

ATOM_WIDTH = 0.25  # Gaussian sigma in lattice periods


class SpecError(ValueError):
    """PolycrystalSpec violates its invariants."""


class LatticeType(str, enum.Enum):
    CUBIC = "cubic"
    HEXAGONAL = "hexagonal"


def lattice_basis(lattice: LatticeType) -> np.ndarray:
    """Real-space primitive vectors as columns, scaled so the first reciprocal shell has |n| = 1."""
    lattice = LatticeType(lattice)
    if lattice is LatticeType.CUBIC:
        return np.eye(3)
    r3 = math.sqrt(3.0)
    return np.array([[2 / r3, 1 / r3, 0.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 0.0, 1.0]])


def reference_directions(lattice: LatticeType) -> np.ndarray:
    """Unit reciprocal vectors, one per antipodal pair of the first shell used for analysis."""
    lattice = LatticeType(lattice)
    if lattice is LatticeType.CUBIC:
        return np.eye(3)
    r3 = math.sqrt(3.0)
    return np.array([[r3 / 2, -0.5, 0.0],
                     [r3 / 2, 0.5, 0.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 0.0, 1.0]])


def reference_wavevectors(lattice: LatticeType, N: float) -> np.ndarray:
    """Half-domain dominant wavevectors N * n_j of the undeformed lattice, shape (K, 3)."""
    if N <= 0:
        raise ValueError("N must be positive")
    return N * reference_directions(lattice)


def elemental_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    out = np.eye(3)
    out[i, i] = out[j, j] = c
    out[i, j], out[j, i] = -s, s
    return out


def compose_euler(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """R = R_1(alpha) R_2(beta) R_3(gamma), rotations about e1, e2, e3."""
    return elemental_rotation(0, alpha) @ elemental_rotation(1, beta) @ elemental_rotation(2, gamma)


# ---------------------------------------------------------------------------
# spec types

@dataclass
class Warp:
    """Displacement ``amplitude * direction * sin(2 pi k.x)`` of reference coordinates."""
    amplitude: float
    wavevector: tuple[int, int, int]
    direction: tuple[float, float, float]


@dataclass
class GrainSpec:
    seed: tuple[float, float, float]
    euler: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stretch: list | None = None   # symmetric 3x3, defaults to identity
    warp: Warp | None = None

    def matrix(self) -> np.ndarray:
        R = compose_euler(*self.euler)
        U = np.eye(3) if self.stretch is None else np.asarray(self.stretch, dtype=float)
        return R @ U


@dataclass
class VacancySpec:
    position: tuple[float, float, float]
    radius: float = 1.0   # lattice spacings; atoms within it of the nearest site are removed


@dataclass
class DislocationSpec:
    """Extra patch of atoms on the mid-plane between two lattice planes.

    The patch is ``height`` spacings tall along ``extent_axis`` and
    ``length`` spacings long along ``line_axis``; its rim is a prismatic
    dislocation loop with Burgers vector one spacing along ``normal_axis``.
    With ``relax`` the surrounding sites are pushed apart by the Volterra
    displacement ``b * Omega / (4 pi)`` (``Omega`` the solid angle of the
    patch), tapered to zero between ``relax_radius / 2`` and
    ``relax_radius`` spacings from it.  Axes refer to reference-lattice
    directions.
    """
    position: tuple[float, float, float]
    normal_axis: int = 0
    line_axis: int = 2
    extent_axis: int = 1
    height: int = 4
    length: int = 6
    relax: bool = True
    relax_radius: float = 4.0


@dataclass
class PolycrystalSpec:
    dims: int
    lattice: LatticeType = LatticeType.CUBIC
    N: float = 16.0
    grains: list[GrainSpec] = field(default_factory=list)
    vacancies: list[VacancySpec] = field(default_factory=list)
    dislocations: list[DislocationSpec] = field(default_factory=list)
    alpha: float | dict = 1.0   # constant, or {"const": a0, "gradient": [g1, g2, g3]}
    trend: float | dict = 0.0
    noise_var: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        L = self.dims
        if not isinstance(L, (int, np.integer)) or L < 8:
            raise SpecError(f"dims must be an integer >= 8, got {L}")
        if not 4 <= self.N <= L / 4:
            raise SpecError(f"N must satisfy 4 <= N <= L/4 = {L / 4}, got {self.N}")
        if not self.grains:
            raise SpecError("at least one grain is required")
        seeds = np.array([g.seed for g in self.grains], dtype=float) % 1.0
        for i, j in itertools.combinations(range(len(seeds)), 2):
            if np.allclose(seeds[i], seeds[j]):
                raise SpecError(f"grain seeds {i} and {j} coincide")
        for g in self.grains:
            if not np.all(np.isfinite(g.euler)):
                raise SpecError("rotation angles must be finite")
            if g.stretch is not None:
                U = np.asarray(g.stretch, dtype=float)
                if U.shape != (3, 3) or not np.allclose(U, U.T) or np.linalg.eigvalsh(U).min() <= 0:
                    raise SpecError("stretch must be a symmetric positive definite 3x3 matrix")
        if self.noise_var < 0 or not math.isfinite(self.noise_var):
            raise SpecError("noise variance must be finite and >= 0")
        self.lattice = LatticeType(self.lattice)

    # -- structured text round trip
    def to_dict(self) -> dict:
        d = asdict(self)
        d["lattice"] = LatticeType(self.lattice).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolycrystalSpec":
        d = dict(d)
        grains = []
        for g in d.pop("grains", []):
            g = dict(g)
            if g.get("warp") is not None:
                g["warp"] = Warp(**g["warp"])
            grains.append(GrainSpec(**g))
        vac = [VacancySpec(**v) for v in d.pop("vacancies", [])]
        dis = [DislocationSpec(**v) for v in d.pop("dislocations", [])]
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        spec = cls(grains=grains, vacancies=vac, dislocations=dis, **d)
        spec.lattice = LatticeType(spec.lattice)
        return spec


@dataclass(eq=False)
class GroundTruth:
    grain_id: np.ndarray        # (L, L, L) int
    G: np.ndarray               # (L, L, L, 3, 3); NaN where undefined
    defect_mask: np.ndarray     # (L, L, L) bool: grain boundaries, seams, point/line defects
    boundary_mask: np.ndarray   # grain boundaries between distinct grains only
    seam_mask: np.ndarray       # lattice discontinuities where a grain meets its periodic image
    defect_sites: list = field(default_factory=list)   # unit-cube positions of isolated defects


# ---------------------------------------------------------------------------
# rendering

def _periodic_gauss_1d(y: np.ndarray, sigma: float) -> np.ndarray:
    d = y - np.round(y)
    out = np.zeros_like(d)
    for m in range(-3, 4):
        out += np.exp(-((d - m) ** 2) / (2 * sigma**2))
    return out


def shape_function(y: np.ndarray, lattice: LatticeType, sigma: float = ATOM_WIDTH) -> np.ndarray:
    """Mean-free lattice of Gaussian bumps evaluated at reference coordinates ``y`` (..., 3)."""
    lattice = LatticeType(lattice)
    y = np.asarray(y, dtype=float)
    if lattice is LatticeType.CUBIC:
        val = (_periodic_gauss_1d(y[..., 0], sigma) * _periodic_gauss_1d(y[..., 1], sigma)
               * _periodic_gauss_1d(y[..., 2], sigma))
        return val - (math.sqrt(2 * math.pi) * sigma) ** 3
    A = lattice_basis(lattice)
    u = y @ np.linalg.inv(A).T
    base = np.round(u)
    val = np.zeros(y.shape[:-1])
    for o in itertools.product(range(-2, 3), repeat=3):
        p = (base + np.array(o)) @ A.T
        val += np.exp(-np.sum((y - p) ** 2, axis=-1) / (2 * sigma**2))
    return val - (2 * math.pi * sigma**2) ** 1.5 / abs(np.linalg.det(A))


def _field_value(spec_field, x: np.ndarray) -> np.ndarray:
    if isinstance(spec_field, dict):
        g = np.asarray(spec_field.get("gradient", (0.0, 0.0, 0.0)), dtype=float)
        return float(spec_field.get("const", 0.0)) + (x - 0.5) @ g
    return np.full(x.shape[:-1], float(spec_field))


def _min_image(d):
    return d - np.round(d)


def grain_phase(grain: GrainSpec, xt: np.ndarray):
    """phi(x) and G = (grad phi)^T at unwrapped coordinates ``xt`` (..., 3)."""
    M = grain.matrix()
    phi = xt @ M
    G = np.broadcast_to(M, xt.shape[:-1] + (3, 3)).copy()
    if grain.warp is not None and grain.warp.amplitude != 0:
        k = np.asarray(grain.warp.wavevector, dtype=float)
        dvec = np.asarray(grain.warp.direction, dtype=float)
        arg = 2 * np.pi * (xt @ k)
        phi = phi + grain.warp.amplitude * np.sin(arg)[..., None] * dvec
        # phi_i += A d_i sin(2 pi k.x)  ->  G[:, i] += 2 pi A cos(.) d_i k
        G = G + (2 * np.pi * grain.warp.amplitude * np.cos(arg))[..., None, None] * np.outer(k, dvec)
    return phi, G


def _unwrapped(grain: GrainSpec, x: np.ndarray) -> np.ndarray:
    seed = np.asarray(grain.seed, dtype=float) % 1.0
    return seed + _min_image(x - seed)


def _bump_sum(y: np.ndarray, sites: np.ndarray, sigma: float = ATOM_WIDTH) -> np.ndarray:
    out = np.zeros(y.shape[:-1])
    for p in sites:
        out += np.exp(-np.sum((y - p) ** 2, axis=-1) / (2 * sigma**2))
    return out


def _rect_distance(p: np.ndarray, rect) -> np.ndarray:
    """Distance from local points (n, h, l) to the patch rectangle at n = rect[0]."""
    n0, h1, h2, l1, l2 = rect
    dh = np.maximum(np.maximum(h1 - p[..., 1], p[..., 1] - h2), 0.0)
    dl = np.maximum(np.maximum(l1 - p[..., 2], p[..., 2] - l2), 0.0)
    return np.sqrt((p[..., 0] - n0) ** 2 + dh**2 + dl**2)


def _rim_distance(p: np.ndarray, rect) -> np.ndarray:
    """Distance from local points to the rectangle's boundary (the dislocation loop)."""
    n0, h1, h2, l1, l2 = rect
    dn = p[..., 0] - n0
    out = np.full(p.shape[:-1], np.inf)
    for hh in (h1, h2):
        dl = np.maximum(np.maximum(l1 - p[..., 2], p[..., 2] - l2), 0.0)
        out = np.minimum(out, np.sqrt(dn**2 + (p[..., 1] - hh) ** 2 + dl**2))
    for ll in (l1, l2):
        dh = np.maximum(np.maximum(h1 - p[..., 1], p[..., 1] - h2), 0.0)
        out = np.minimum(out, np.sqrt(dn**2 + dh**2 + (p[..., 2] - ll) ** 2))
    return out


def loop_solid_angle(p: np.ndarray, rect) -> np.ndarray:
    """Signed solid angle of the patch rectangle seen from local points; +-2 pi on its faces."""
    n0, h1, h2, l1, l2 = rect
    z = p[..., 0] - n0
    z = np.where(z == 0, 1e-12, z)
    out = np.zeros(p.shape[:-1])
    for i, hh in enumerate((h1, h2)):
        for j, ll in enumerate((l1, l2)):
            X, Y = hh - p[..., 1], ll - p[..., 2]
            R = np.sqrt(X * X + Y * Y + z * z)
            out += (-1) ** (i + j) * np.arctan(X * Y / (z * R))
    return out


def _relaxed_lattice_delta(yl: np.ndarray, rect, radius: float) -> np.ndarray:
    """Change of the cubic bump sum when nearby sites move by the loop displacement."""
    base = np.round(yl)
    out = np.zeros(yl.shape[0])
    for o in itertools.product(range(-2, 3), repeat=3):
        site = base + np.array(o, dtype=float)
        d = _rect_distance(site, rect)
        t = np.clip((d - radius / 2) / (radius / 2), 0.0, 1.0)
        taper = np.cos(0.5 * np.pi * t) ** 2
        u = loop_solid_angle(site, rect) / (4 * np.pi) * taper
        moved = site.copy()
        moved[:, 0] += u
        r_new = np.sum((yl - moved) ** 2, axis=-1)
        r_old = np.sum((yl - site) ** 2, axis=-1)
        out += np.exp(-r_new / (2 * ATOM_WIDTH**2)) - np.exp(-r_old / (2 * ATOM_WIDTH**2))
    return out


def _commensurate(grain: GrainSpec, lattice: LatticeType, N: float, axis: int) -> bool:
    if grain.warp is not None and grain.warp.amplitude != 0:
        k = np.asarray(grain.warp.wavevector, dtype=float)
        if not np.allclose(k, np.round(k)):
            return False
    shift = N * grain.matrix()[axis]           # change of N phi under x -> x + e_axis
    frac = np.linalg.solve(lattice_basis(lattice), shift)
    return bool(np.allclose(frac, np.round(frac), atol=1e-9))


def generate_polycrystal(spec: PolycrystalSpec) -> tuple[ScalarVolume, GroundTruth]:
    spec.validate()
    L, N = int(spec.dims), float(spec.N)
    lattice = LatticeType(spec.lattice)
    g1 = np.arange(L) / L
    x = np.stack(np.meshgrid(g1, g1, g1, indexing="ij"), axis=-1)

    seeds = np.array([g.seed for g in spec.grains], dtype=float) % 1.0
    dist = np.stack([np.sum(_min_image(x - s) ** 2, axis=-1) for s in seeds])
    grain_id = np.argmin(dist, axis=0)

    alpha = _field_value(spec.alpha, x)
    trend = _field_value(spec.trend, x)
    f = np.empty((L, L, L))
    G = np.empty((L, L, L, 3, 3))
    seam = np.zeros((L, L, L), dtype=bool)
    for k, grain in enumerate(spec.grains):
        sel = grain_id == k
        xt = _unwrapped(grain, x[sel])
        phi, Gk = grain_phase(grain, xt)
        f[sel] = alpha[sel] * shape_function(N * phi, lattice) + trend[sel]
        G[sel] = Gk
        # self-seam: on the far side of the torus from the seed
        for ax in range(3):
            if _commensurate(grain, lattice, N, ax):
                continue
            off = _min_image(x[..., ax] - seeds[k, ax])
            nxt = np.roll(off, -1, axis=ax)
            jump = (nxt < off) & sel & np.roll(sel, -1, axis=ax)
            seam |= jump | np.roll(jump, 1, axis=ax)

    # grain boundaries: any face neighbour in another grain
    boundary = np.zeros_like(seam)
    for ax in range(3):
        for sh in (1, -1):
            boundary |= np.roll(grain_id, sh, axis=ax) != grain_id

    defect = boundary | seam
    sites = []
    ref_units = N  # one lattice spacing = 1/N in unit-cube length
    for vac in spec.vacancies:
        pos = np.asarray(vac.position, dtype=float) % 1.0
        k = int(np.argmin([np.sum(_min_image(pos - s) ** 2) for s in seeds]))
        grain = spec.grains[k]
        y0, _ = grain_phase(grain, _unwrapped(grain, pos[None])[0][None])
        y0 = N * y0[0]
        A = lattice_basis(lattice)
        base = np.round(np.linalg.solve(A, y0))
        cand = [(base + np.array(o)) @ A.T for o in itertools.product(range(-3, 4), repeat=3)]
        p0 = min(cand, key=lambda p: np.sum((p - y0) ** 2))
        removed = np.array([p for p in cand if np.linalg.norm(p - p0) <= vac.radius + 1e-9])
        sel = grain_id == k
        phi, _ = grain_phase(grain, _unwrapped(grain, x[sel]))
        f[sel] -= alpha[sel] * _bump_sum(N * phi, removed)
        near = np.sqrt(np.sum(_min_image(x - pos) ** 2, axis=-1)) * ref_units <= vac.radius + 1.0
        defect |= near
        sites.append(tuple(pos))

    for dis in spec.dislocations:
        pos = np.asarray(dis.position, dtype=float) % 1.0
        k = int(np.argmin([np.sum(_min_image(pos - s) ** 2) for s in seeds]))
        grain = spec.grains[k]
        if lattice is not LatticeType.CUBIC:
            raise SpecError("dislocations are only implemented for the cubic lattice")
        if len({dis.normal_axis, dis.line_axis, dis.extent_axis}) != 3:
            raise SpecError("dislocation axes must be distinct")
        y0, _ = grain_phase(grain, _unwrapped(grain, pos[None])[0][None])
        base = np.round(N * y0[0])
        axes = (dis.normal_axis, dis.extent_axis, dis.line_axis)
        half = dis.length // 2
        # patch rectangle in (normal, extent, line) coordinates relative to base
        rect = (0.5, -0.5, dis.height - 0.5, -half - 0.5, dis.length - half - 0.5)
        local = np.array([[0.5, j, l] for j in range(dis.height)
                          for l in range(-half, dis.length - half)])
        to_global = np.zeros((3, 3))
        to_global[range(3), list(axes)] = 1.0        # local coords -> reference axes
        extra = base + local @ to_global
        sel = grain_id == k
        phi, _ = grain_phase(grain, _unwrapped(grain, x[sel]))
        y = N * phi
        yl = (y - base) @ to_global.T                  # voxel positions in local coords
        d_rect = _rect_distance(yl, rect)
        near = d_rect <= dis.relax_radius + 2.5
        add = _bump_sum(y[near], extra)
        if dis.relax:
            add += _relaxed_lattice_delta(yl[near], rect, dis.relax_radius)
        delta = np.zeros(sel.sum())
        delta[near] = add
        f[sel] += alpha[sel] * delta
        mask = np.zeros((L, L, L), dtype=bool)
        mask[sel] = d_rect <= 2.0
        defect |= mask
        undefined = np.zeros((L, L, L), dtype=bool)
        undefined[sel] = _rim_distance(yl, rect) <= 2.0
        G[undefined] = np.nan
        Minv = np.linalg.inv(grain.matrix().T)
        xt = Minv @ (extra.mean(axis=0) / N)
        sites.append(tuple((seeds[k] + _min_image(xt - seeds[k])) % 1.0))

    vol = ScalarVolume(f, VolumeMeta(dims=(L, L, L), provenance="crystalsst.synthetic"))
    if spec.noise_var > 0:
        vol = add_gaussian_noise(vol, spec.noise_var, spec.seed)
    return vol, GroundTruth(grain_id=grain_id, G=G, defect_mask=defect, boundary_mask=boundary,
                            seam_mask=seam, defect_sites=sites)


def add_gaussian_noise(vol: ScalarVolume, variance: float, seed: int = 0) -> ScalarVolume:
    if not math.isfinite(variance) or variance < 0:
        raise ValueError(f"noise variance must be finite and >= 0, got {variance}")
    if variance == 0:
        return vol
    rng = np.random.default_rng(seed)
    noisy = vol.data + rng.normal(0.0, math.sqrt(variance), size=vol.dims)
    return ScalarVolume(noisy, VolumeMeta(dims=vol.dims, voxel_size=vol.meta.voxel_size,
                                          provenance=f"{vol.meta.provenance}+noise({variance})"))


def jacobian_determinant_ok(grain: GrainSpec, n_samples: int = 256, seed: int = 0) -> bool:
    """Sample det(G) > 0 for the grain's phase map."""
    rng = np.random.default_rng(seed)
    _, G = grain_phase(grain, rng.random((n_samples, 3)))
    return bool(np.all(np.linalg.det(G) > 0))


# ---------------------------------------------------------------------------
# presets used by the CLI and the acceptance suite

TWO_GRAIN_ROTATION = (0.30, 0.20, 0.25)
TRIPLE_JUNCTION_ROTATIONS = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.35), (0.25, 0.15, -0.3))


def preset(name: str, dims: int = 64, N: float | None = None, noise_var: float = 0.0,
           seed: int = 0) -> PolycrystalSpec:
    if name == "single-grain-cubic":
        spec = PolycrystalSpec(dims=dims, N=N or dims / 4, grains=[GrainSpec((0.5, 0.5, 0.5))])
    elif name == "two-grain-cubic":
        spec = PolycrystalSpec(dims=dims, N=N or dims / 4, grains=[
            GrainSpec((0.25, 0.5, 0.5)),
            GrainSpec((0.75, 0.5, 0.5), euler=TWO_GRAIN_ROTATION)])
    elif name == "triple-junction-hex":
        seeds = ((0.25, 0.25, 0.5), (0.75, 0.25, 0.5), (0.5, 0.75, 0.5))
        spec = PolycrystalSpec(dims=dims, lattice=LatticeType.HEXAGONAL, N=N or dims / 4,
                               grains=[GrainSpec(s, euler=e)
                                       for s, e in zip(seeds, TRIPLE_JUNCTION_ROTATIONS)])
    elif name == "isolated-defects-cubic":
        spec = PolycrystalSpec(dims=dims, N=N or dims / 4, grains=[GrainSpec((0.5, 0.5, 0.5))],
                               vacancies=[VacancySpec((0.3, 0.5, 0.5), radius=3.0)],
                               dislocations=[DislocationSpec((0.7, 0.5, 0.5))])
    else:
        raise SpecError(f"unknown preset {name!r}")
    spec.noise_var = noise_var
    spec.seed = seed
    return spec


PRESETS = ("single-grain-cubic", "two-grain-cubic", "triple-junction-hex", "isolated-defects-cubic")
