"""Enhancing-tumor suppression for predicted label volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import LabelVolume, check_labels

ET_LABEL = 4
PROFILES = {"brats2018": 200, "brats2020": 1000}


@dataclass(frozen=True)
class PostprocConfig:
    et_threshold: int = PROFILES["brats2018"]
    relabel_target: int = 1

    def __post_init__(self):
        if self.et_threshold < 0:
            raise ValueError(f"et_threshold must be >= 0, got {self.et_threshold}")
        if self.relabel_target not in (0, 1, 2):
            raise ValueError(f"relabel_target must be 0, 1 or 2, got {self.relabel_target}")

    @classmethod
    def profile(cls, name: str) -> "PostprocConfig":
        try:
            return cls(PROFILES[name.lower()])
        except KeyError:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def threshold_et(vol, cfg: PostprocConfig = PostprocConfig()):
    """Relabel every ET voxel when fewer than ``cfg.et_threshold`` are present.

    Returns the same type as ``vol`` (array or :class:`LabelVolume`); an
    untouched volume is returned as an identical copy.
    """
    if isinstance(vol, LabelVolume):
        return LabelVolume(threshold_et(vol.voxels, cfg), vol.spacing)
    voxels = np.asarray(vol)
    check_labels(voxels)
    out = voxels.copy()
    et = out == ET_LABEL
    if int(et.sum()) < cfg.et_threshold:
        out[et] = cfg.relabel_target
    return out


def et_count(vol) -> int:
    voxels = vol.voxels if isinstance(vol, LabelVolume) else np.asarray(vol)
    return int((voxels == ET_LABEL).sum())
