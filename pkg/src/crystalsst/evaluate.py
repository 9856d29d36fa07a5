"""Comparison of an analysis result against generator ground truth.

Everything is evaluated on the analysis grid (L_B^3): ground-truth fields
are sampled at the voxel each B point sits on, distances are periodic and
measured in B voxels.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .analysis import DeformationField, misorientation
from .synthetic import GroundTruth, LatticeType


def sample_to_b(arr: np.ndarray, lb: int) -> np.ndarray:
    L = arr.shape[0]
    idx = (np.arange(lb) * L) // lb
    return arr[np.ix_(idx, idx, idx)]


def coarsen_mask(mask: np.ndarray, lb: int) -> np.ndarray:
    """B voxel is set if any volume voxel within half a B spacing of it is set."""
    L = mask.shape[0]
    step = L // lb
    half = step // 2
    grown = mask
    if half > 0:
        grown = ndimage.maximum_filter(mask, size=2 * half + 1, mode="wrap")
    return sample_to_b(grown, lb)


def periodic_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance (in voxels) to the nearest set voxel on the torus."""
    n = mask.shape[0]
    if not mask.any():
        return np.full(mask.shape, np.inf)
    tiled = np.tile(~mask, (3, 3, 3))
    d = ndimage.distance_transform_edt(tiled)
    return d[n:2 * n, n:2 * n, n:2 * n]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def boundary_report(df: DeformationField, gt: GroundTruth, tol: float = 3.0) -> dict:
    lb = df.lb
    truth = coarsen_mask(gt.defect_mask, lb)
    bnd = coarsen_mask(gt.boundary_mask, lb)
    d_truth = periodic_distance(truth)
    d_bnd = periodic_distance(bnd)
    mask = df.defect
    interior = d_truth > 2
    return {
        "mask_fraction": float(mask.mean()),
        "boundary_contained": float(mask[bnd].mean()) if bnd.any() else 1.0,
        "near_truth_fraction": float(np.mean(d_truth[mask] <= tol)) if mask.any() else 1.0,
        "near_boundary_fraction": float(np.mean(d_bnd[mask] <= tol)) if mask.any() else 1.0,
        "boundary_mass_max": float(df.mass[bnd].max()) if bnd.any() else float("nan"),
        "interior_mass_p5": float(np.percentile(df.mass[interior], 5)) if interior.any() else float("nan"),
    }


def orientation_report(df: DeformationField, gt: GroundTruth, rotations, lattice=LatticeType.CUBIC,
                       margin: float = 2.0) -> list[dict]:
    """Per-grain misorientation statistics (degrees) over interior voxels.

    ``rotations[k]`` is the true rotation factor of grain k; interior means
    farther than ``margin`` B voxels from the true defect set.  Voxels the
    analysis flagged as defects count as failures.
    """
    lb = df.lb
    gid = sample_to_b(gt.grain_id, lb)
    d_truth = periodic_distance(coarsen_mask(gt.defect_mask, lb))
    out = []
    for k, R0 in enumerate(rotations):
        sel = (gid == k) & (d_truth > margin)
        n = int(sel.sum())
        if n == 0:
            out.append({"grain": k, "n": 0})
            continue
        good = sel & ~df.defect
        err = np.full(n, np.inf)
        e_good = np.degrees(misorientation(df.R[good], np.asarray(R0), lattice))
        err[~df.defect[sel]] = e_good
        eul = np.degrees(df.euler[good])
        out.append({
            "grain": k, "n": n,
            "frac_within_2deg": float(np.mean(err <= 2.0)),
            "frac_within_4deg": float(np.mean(err <= 4.0)),
            "median_err": float(np.median(err)),
            "p90_err": float(np.percentile(err, 90)),
            "euler_mean": np.mean(eul, axis=0).tolist() if eul.size else [np.nan] * 3,
            "euler_std": np.std(eul, axis=0).tolist() if eul.size else [np.nan] * 3,
        })
    return out
