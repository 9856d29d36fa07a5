"""Per-voxel crystal analysis of a squeezed energy tensor.

For every spatial index ``b`` the dominant wavevectors are located as
greedy energy balls, ``mass(b)`` is the fraction of energy they capture,
and their centroids give the inverse deformation gradient by least squares.
``G`` maps reference reciprocal vectors to observed wavevectors,
``nu_j = G (N n_j)``; with ``G = R U`` the rotation ``R`` is the lattice
orientation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import spectrum, synchrosqueeze, wavepacket
from .synthetic import LatticeType, elemental_rotation, reference_wavevectors
from .synchrosqueeze import AnalysisError, SphericalGrid, SqueezeTensor
from .volume_io import ScalarVolume


@dataclass(frozen=True)
class PeakBall:
    center: np.ndarray      # Cartesian, folded
    radius: float
    energy: float
    n_cells: int


@dataclass
class AnalysisConfig:
    eps_rel: float = 0.1
    eta: float = 0.7
    delta_cells: float = 3.0
    delta: float | None = None        # explicit radius; overrides delta_cells
    lattice: LatticeType = LatticeType.CUBIC
    k_ref: int | None = None          # defaults to the lattice's reference count
    s: float = 0.5
    c_w: float = 2.0
    lb: int | None = None
    band: tuple[float, float] | None = None
    dv: float = 1.0
    dpsi: float = math.pi / 60
    dtheta: float = math.pi / 60
    tau: float = 0.1
    band_method: str = "prominence"
    noise_floor: bool = True          # subtract the white-noise floor before band detection
    kappa: float = 2.0                # keep |W| >= kappa * noise level of its atom (0: off)
    debias: bool = True               # subtract the expected noise energy from each weight
    mass_mode: str = "plain"          # "compensated": remove homogeneous noise energy from mass
    centroid: str = "moment"          # "moment": exact folded vectors, "cell": cell centres
    threads: int | None = None

    def validate(self) -> None:
        if not 0 < self.eps_rel < 1:
            raise ValueError(f"eps_rel must lie in (0, 1), got {self.eps_rel}")
        if not 0 <= self.eta < 1:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.delta_cells <= 0:
            raise ValueError("delta_cells must be positive")
        if self.mass_mode not in ("plain", "compensated"):
            raise ValueError(f"unknown mass mode {self.mass_mode!r}")
        if self.centroid not in ("moment", "cell"):
            raise ValueError(f"unknown centroid mode {self.centroid!r}")
        self.lattice = LatticeType(self.lattice)

    def resolved_k(self) -> int:
        return self.k_ref or len(reference_wavevectors(self.lattice, 1.0))

    def resolved_delta(self, N: float) -> float:
        if self.delta is not None:
            return float(self.delta)
        # delta_cells angular cells, measured as arc length on the sphere |xi| = N
        return self.delta_cells * N * max(self.dpsi, self.dtheta)


# ---------------------------------------------------------------------------
# balls and mass

def _antipodal_dist(u: np.ndarray, c: np.ndarray):
    """Distance from rows of ``u`` to the line pair {c, -c}, and the sign that attains it."""
    dp = np.linalg.norm(u - c, axis=-1)
    dm = np.linalg.norm(u + c, axis=-1)
    return np.minimum(dp, dm), np.where(dm < dp, -1.0, 1.0)


def find_peak_balls(points: np.ndarray, energy: np.ndarray, K: int, delta: float,
                    moments: np.ndarray | None = None):
    """Greedy selection of ``K`` energy balls among weighted cells.

    ``points`` are the cell locations (Cartesian, folded); ``moments`` are
    optional energy-weighted sums of the exact vectors in each cell, used for
    the centroid instead of the cell location.  Returns ``(balls, degenerate)``
    with balls sorted by captured energy.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    energy = np.asarray(energy, dtype=float).ravel()
    if moments is None:
        moments = points * energy[:, None]
    alive = energy > 0
    balls = []
    for _ in range(K):
        if not np.any(alive):
            break
        i = int(np.argmax(np.where(alive, energy, -np.inf)))
        d, sign = _antipodal_dist(points, points[i])
        inside = alive & (d <= delta)
        e = float(energy[inside].sum())
        m = (moments[inside] * sign[inside, None]).sum(axis=0)
        balls.append(PeakBall(center=m / e, radius=delta, energy=e, n_cells=int(inside.sum())))
        alive &= ~inside
    balls.sort(key=lambda b: -b.energy)
    return balls, len(balls) < K


def defect_mass(balls, total_energy: float) -> float:
    if total_energy <= 0:
        return 0.0
    return float(min(1.0, sum(b.energy for b in balls) / total_energy))


def compensated_mass(captured: np.ndarray, total: np.ndarray, K: int, delta: float,
                     v_range) -> np.ndarray:
    """mass with a homogeneous noise energy removed from numerator and denominator.

    The noise energy per voxel is the median over voxels of the energy left
    outside the balls, scaled up by the share ``q`` of the half annulus the
    balls cover (the part of the noise they also capture).
    """
    r1, r2 = v_range
    q = min(0.5, K * (4 / 3) * np.pi * delta**3 / ((2 * np.pi / 3) * (r2**3 - r1**3)))
    has = total > 0
    if not np.any(has):
        return np.zeros_like(total)
    noise = float(np.median((total - captured)[has])) / (1 - q)
    num = captured - q * noise
    den = total - noise
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(np.where(has, out, 0.0), 0.0, 1.0)


def threshold_defects(mass: np.ndarray, eta: float) -> np.ndarray:
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    return np.asarray(mass) < eta


# ---------------------------------------------------------------------------
# wavevectors, gradient, rotation

def match_to_references(vectors: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Assign each reference the estimated vector with the best total |cos|; fold signs to it.

    Returns an array shaped like ``refs``; rows without a partner are NaN.
    """
    vectors = np.asarray(vectors, dtype=float).reshape(-1, 3)
    refs = np.asarray(refs, dtype=float)
    K = refs.shape[0]
    out = np.full_like(refs, np.nan)
    if vectors.shape[0] == 0:
        return out
    vn = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    rn = refs / np.linalg.norm(refs, axis=1, keepdims=True)
    cos = np.abs(rn @ vn.T)                  # (K, n)
    m = min(K, vectors.shape[0])
    best, best_score = None, -np.inf
    for refs_sel in itertools.combinations(range(K), m):
        for perm in itertools.permutations(range(vectors.shape[0]), m):
            score = cos[list(refs_sel), list(perm)].sum()
            if score > best_score:
                best, best_score = (refs_sel, perm), score
    for j, i in zip(*best):
        v = vectors[i]
        out[j] = v if v @ refs[j] >= 0 else -v
    return out


def fit_inverse_gradient(nu: np.ndarray, refs: np.ndarray):
    """Least squares G minimising sum_j |nu_j - G r_j|^2; returns (G, residual).

    ``refs`` already carry the factor N.  Rows of ``nu`` that are NaN are ignored.
    """
    nu = np.asarray(nu, dtype=float)
    refs = np.asarray(refs, dtype=float)
    ok = np.all(np.isfinite(nu), axis=1)
    A = refs[ok]
    if A.shape[0] < 3 or np.linalg.matrix_rank(A) < 3:
        raise np.linalg.LinAlgError("reference set is rank deficient")
    # nu_j^T = r_j^T G^T  ->  A G^T = V
    Gt, *_ = np.linalg.lstsq(A, nu[ok], rcond=None)
    G = Gt.T
    resid = float(np.sum((nu[ok] - A @ Gt) ** 2))
    return G, resid


def polar_decompose(G: np.ndarray, tol: float = 1e-12):
    """G = R U with R a proper rotation and U symmetric.

    Returns ``(R, U, ok)``.  ``ok`` is False for singular G (then R = I) and
    for det G < 0, where enforcing det R = +1 leaves U with a negative
    eigenvalue.
    """
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise ValueError("G must be finite")
    W, sig, Vt = np.linalg.svd(G)
    if sig[0] == 0 or sig[-1] <= tol * sig[0]:
        return np.eye(3), G.copy(), False
    ok = True
    if np.linalg.det(W @ Vt) < 0:
        W = W.copy()
        W[:, -1] *= -1
        sig = sig.copy()
        sig[-1] *= -1
        ok = False
    R = W @ Vt
    U = Vt.T @ np.diag(sig) @ Vt
    return R, 0.5 * (U + U.T), ok


def compose_rotation(alpha: float, beta: float, gamma: float) -> np.ndarray:
    return elemental_rotation(0, alpha) @ elemental_rotation(1, beta) @ elemental_rotation(2, gamma)


def euler_angles(R: np.ndarray, atol: float = 1e-6):
    """(alpha, beta, gamma) with R = R_1(alpha) R_2(beta) R_3(gamma)."""
    R = np.asarray(R, dtype=float)
    if np.linalg.norm(R.T @ R - np.eye(3)) > atol or np.linalg.det(R) < 0:
        raise ValueError("input is not a proper rotation")
    beta = math.asin(max(-1.0, min(1.0, R[0, 2])))
    if abs(math.cos(beta)) < 1e-8:
        # gimbal lock: only alpha +- gamma is defined; take gamma = 0
        return math.atan2(R[2, 1], R[1, 1]), beta, 0.0
    gamma = math.atan2(-R[0, 1], R[0, 0])
    alpha = math.atan2(-R[1, 2], R[2, 2])
    return alpha, beta, gamma


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix (or stack)."""
    tr = np.trace(np.asarray(R), axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1) / 2, -1.0, 1.0))


def symmetry_rotations(lattice: LatticeType) -> np.ndarray:
    """Proper rotations that map the reference lattice onto itself."""
    lattice = LatticeType(lattice)
    if lattice is LatticeType.CUBIC:
        mats = []
        for perm in itertools.permutations(range(3)):
            for signs in itertools.product((1, -1), repeat=3):
                P = np.zeros((3, 3))
                P[range(3), perm] = signs
                if np.linalg.det(P) > 0:
                    mats.append(P)
        return np.array(mats)
    mats = [elemental_rotation(2, k * math.pi / 3) for k in range(6)]
    mats += [m @ elemental_rotation(0, math.pi) for m in mats]
    return np.array(mats)


def misorientation(R: np.ndarray, R0: np.ndarray, lattice=LatticeType.CUBIC) -> np.ndarray:
    """Smallest geodesic angle between R and any symmetry-equivalent of R0 (radians)."""
    R = np.asarray(R, dtype=float)
    eq = R0[None] @ symmetry_rotations(lattice)                     # (S, 3, 3)
    rel = np.einsum("...ji,sjk->...sik", R, eq)                     # R^T (R0 S)
    return rotation_angle(rel).min(axis=-1)


# ---------------------------------------------------------------------------
# end to end

@dataclass(eq=False)
class DeformationField:
    lb: int
    mass: np.ndarray            # (LB, LB, LB)
    defect: np.ndarray          # bool
    nu: np.ndarray              # (LB, LB, LB, K, 3)
    G: np.ndarray               # (LB, LB, LB, 3, 3), NaN where defect
    R: np.ndarray
    U: np.ndarray
    euler: np.ndarray           # (LB, LB, LB, 3)
    n_balls: np.ndarray
    residual: np.ndarray
    info: dict = field(default_factory=dict)

    def to_volume_grid(self, arr: np.ndarray, L: int) -> np.ndarray:
        """Nearest-neighbour map of an (LB, LB, LB, ...) field to the L^3 voxel grid."""
        idx = (np.arange(L) * self.lb) // L
        return arr[np.ix_(idx, idx, idx)]


def analyze_tensor(T: SqueezeTensor, refs: np.ndarray, config: AnalysisConfig, N: float,
                   keep_matched: bool = True) -> DeformationField:
    """Per-voxel balls, mass and gradient fit on a squeezed tensor."""
    config.validate()
    K = refs.shape[0]
    delta = config.resolved_delta(N)
    lb = T.lb
    nvox = lb**3
    mass = np.zeros(nvox)
    captured = np.zeros(nvox)
    total = np.zeros(nvox)
    n_balls = np.zeros(nvox, dtype=int)
    nu = np.full((nvox, K, 3), np.nan)
    G = np.full((nvox, 3, 3), np.nan)
    R = np.full((nvox, 3, 3), np.nan)
    U = np.full((nvox, 3, 3), np.nan)
    eul = np.full((nvox, 3), np.nan)
    resid = np.full(nvox, np.nan)
    reliable = np.zeros(nvox, dtype=bool)

    off = T.b_offsets()
    centres = T.grid.cell_cartesian(T.cell)
    if config.centroid == "moment":
        moments = T.moment
        points = T.moment / T.energy[:, None]
    else:
        moments = centres * T.energy[:, None]
        points = centres
    for b in range(nvox):
        sl = slice(off[b], off[b + 1])
        e = T.energy[sl]
        if e.size == 0:
            continue
        balls, _ = find_peak_balls(points[sl], e, K, delta, moments[sl])
        total[b] = float(e.sum())
        captured[b] = sum(bl.energy for bl in balls)
        mass[b] = defect_mass(balls, total[b])
        good = [bl for bl in balls if bl.energy > 0]
        n_balls[b] = len(good)
        if len(good) < K:
            continue
        vecs = match_to_references(np.array([bl.center for bl in good]), refs)
        nu[b] = vecs
        try:
            Gb, rb = fit_inverse_gradient(vecs, refs)
        except np.linalg.LinAlgError:
            continue
        Rb, Ub, ok = polar_decompose(Gb)
        if not ok:
            continue
        G[b], R[b], U[b], resid[b] = Gb, Rb, Ub, rb
        eul[b] = euler_angles(Rb)
        reliable[b] = True

    if config.mass_mode == "compensated":
        mass = compensated_mass(captured, total, K, delta, T.grid.v_range)
    defect = threshold_defects(mass, config.eta) | ~reliable
    G[defect] = R[defect] = U[defect] = np.nan
    eul[defect] = np.nan
    if not keep_matched:
        nu[defect] = np.nan
    shp = (lb,) * 3
    return DeformationField(lb=lb, mass=mass.reshape(shp), defect=defect.reshape(shp),
                            nu=nu.reshape(shp + (K, 3)), G=G.reshape(shp + (3, 3)),
                            R=R.reshape(shp + (3, 3)), U=U.reshape(shp + (3, 3)),
                            euler=eul.reshape(shp + (3,)), n_balls=n_balls.reshape(shp),
                            residual=resid.reshape(shp))


def analyze_volume(vol: ScalarVolume, config: AnalysisConfig | None = None) -> DeformationField:
    """Spectrum, band, atlas, transform, squeeze and per-voxel analysis in one call."""
    config = config or AnalysisConfig()
    config.validate()
    L = vol.dims[0]
    if vol.dims != (L, L, L):
        raise ValueError(f"analysis needs a cubic volume, got {vol.dims}")
    spec = spectrum.forward_fourier(vol, workers=config.threads)
    floor = spectrum.noise_floor(spec) if config.noise_floor else 0.0
    E = spectrum.radial_power_spectrum(spec, floor=floor)
    if config.band is None:
        band = spectrum.dominant_band(E, tau=config.tau, method=config.band_method)
    else:
        r1, r2 = config.band
        band = spectrum.Band(float(r1), float(r2), spectrum.estimate_wavenumber(E, (r1, r2)))
    N = band.wavenumber
    atlas = wavepacket.build_atlas(L, band, s=config.s, c_w=config.c_w, lb=config.lb)
    sigma = spectrum.noise_sigma(spec) if (config.kappa > 0 or config.debias) else 0.0
    field_ = synchrosqueeze.streaming_wavevectors(spec, atlas, config.eps_rel,
                                                  workers=config.threads, noise_sigma=sigma,
                                                  kappa=config.kappa, debias=config.debias)
    grid = SphericalGrid((band.r1, band.r2), config.dv, config.dpsi, config.dtheta)
    T = synchrosqueeze.squeeze(field_, grid)
    folded = synchrosqueeze.fold_antipodal(field_.v)
    vnorm = np.linalg.norm(folded, axis=1)
    in_range = (vnorm >= band.r1) & (vnorm <= band.r2)
    retained_in_range = float(np.sum(field_.weight[in_range]))
    refs = reference_wavevectors(config.lattice, N)
    if config.k_ref is not None:
        refs = refs[: config.k_ref]
    if T.energy.size == 0:
        raise AnalysisError("no retained wavevector falls inside the band; lower eps_rel")
    out = analyze_tensor(T, refs, config, N)
    out.info = {
        "L": L, "band": [band.r1, band.r2], "N": N, "n_atoms": len(atlas), "L_B": atlas.lb,
        "delta": config.resolved_delta(N), "retained_entries": int(field_.b.size),
        "threshold": field_.threshold,
        "squeezed_energy": T.total_energy(), "retained_energy_in_band": retained_in_range,
        "fubini_residual": abs(T.total_energy() - retained_in_range) / max(retained_in_range, 1e-300),
        "defect_fraction": float(out.defect.mean()),
        "noise_floor": floor,
        "noise_sigma": sigma,
        "radial_spectrum": E,
    }
    return out
