"""BraTS evaluation: region masks, Dice, HD95 and per-case reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

VALID_LABELS = (0, 1, 2, 4)
REGIONS = ("WT", "TC", "ET")
REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}
# Distance assigned when exactly one of the two masks is empty.
HD95_EMPTY_PENALTY = 373.13

_SIX_CONNECTED = np.array([[[0, 0, 0], [0, 1, 0], [0, 0, 0]],
                           [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
                           [[0, 0, 0], [0, 1, 0], [0, 0, 0]]], dtype=bool)


@dataclass
class LabelVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"label volume must be 3D, got shape {self.voxels.shape}")
        check_labels(self.voxels)
        self.voxels = self.voxels.astype(np.uint8, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.voxels.shape


def check_labels(voxels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(voxels), VALID_LABELS)
    if bad.size:
        raise ValueError(f"unknown label values {bad.tolist()}; allowed {VALID_LABELS}")


def regions(vol) -> dict[str, np.ndarray]:
    """Whole tumor {1,2,4}, tumor core {1,4} and enhancing tumor {4} masks."""
    voxels = vol.voxels if isinstance(vol, LabelVolume) else np.asarray(vol)
    check_labels(voxels)
    return {name: np.isin(voxels, labels) for name, labels in REGION_LABELS.items()}


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P| + |G|); 1.0 when both masks are empty."""
    _same_shape(pred, gt)
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Coordinates ``(n, ndim)`` of mask voxels with a 6-connected neighbour outside.

    Voxels on the volume border count as boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    structure = _SIX_CONNECTED if mask.ndim == 3 else None
    interior = binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile, ``q`` in [0, 1]: rank ``q * (n - 1)``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    rank = q * (v.size - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def directed_surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """For each point in ``src``, the distance to its nearest point in ``dst``."""
    scale = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * scale)
    d, _ = tree.query(src * scale, k=1)
    return np.asarray(d, dtype=np.float64)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile surface distances."""
    _same_shape(pred, gt)
    sp = surface(pred)
    sg = surface(gt)
    if len(sp) == 0 and len(sg) == 0:
        return 0.0
    if len(sp) == 0 or len(sg) == 0:
        return HD95_EMPTY_PENALTY
    d_pg = percentile(directed_surface_distances(sp, sg, spacing), 0.95)
    d_gp = percentile(directed_surface_distances(sg, sp, spacing), 0.95)
    return max(d_pg, d_gp)


@dataclass
class EvalReport:
    case_id: str
    dice: dict[str, float]
    hd95: dict[str, float]

    @property
    def mean_dice(self) -> float:
        return sum(self.dice[r] for r in REGIONS) / len(REGIONS)

    @property
    def mean_hd95(self) -> float:
        return sum(self.hd95[r] for r in REGIONS) / len(REGIONS)

    def rows(self):
        for r in REGIONS:
            yield {"case_id": self.case_id, "region": r,
                   "dice": self.dice[r], "hd95": self.hd95[r]}


def evaluate_case(pred, gt, case_id: str = "case") -> EvalReport:
    if not isinstance(pred, LabelVolume):
        pred = LabelVolume(pred)
    if not isinstance(gt, LabelVolume):
        gt = LabelVolume(gt, pred.spacing)
    _same_shape(pred.voxels, gt.voxels)
    if not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    rp, rg = regions(pred), regions(gt)
    return EvalReport(
        case_id,
        {r: dice(rp[r], rg[r]) for r in REGIONS},
        {r: hd95(rp[r], rg[r], gt.spacing) for r in REGIONS},
    )


@dataclass
class Summary:
    n_cases: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)


def summarize(reports: list[EvalReport]) -> Summary:
    """Mean and population standard deviation of each region metric plus the all-region mean."""
    out = Summary(len(reports))
    for metric in ("dice", "hd95"):
        for r in REGIONS + ("mean",):
            if r == "mean":
                vals = [getattr(rep, f"mean_{metric}") for rep in reports]
            else:
                vals = [getattr(rep, metric)[r] for rep in reports]
            key = f"{metric}_{r}"
            out.mean[key] = float(np.mean(vals)) if vals else float("nan")
            out.std[key] = float(np.std(vals)) if vals else float("nan")
    return out


def write_table(reports: list[EvalReport], path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["case_id", "region", "dice", "hd95"], delimiter=delimiter)
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow({**row, "dice": f"{row['dice']:.6f}", "hd95": f"{row['hd95']:.6f}"})


def write_summary(summary: Summary, path) -> None:
    Path(path).write_text(json.dumps(
        {"n_cases": summary.n_cases, "mean": summary.mean, "std": summary.std}, indent=2) + "\n")
