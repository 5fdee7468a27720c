"""Volume files, case manifests and synthetic phantom datasets.

Volume file layout (little-endian)::

    b"ACSV"        magic
    u32            format version (1)
    u32            dtype code: 0 = float32, 1 = uint8 labels
    u32            rank
    u32 * rank     extents
    f32 * rank     voxel spacing in mm
    payload        prod(extents) values, row-major
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import make_rng

MAGIC = b"ACSV"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MODALITIES = ("T1", "T1Gd", "T2", "FLAIR")
DATASET_FORMAT = "acsseg-dataset/1"
DATA_DIR_ENV = "ACSSEG_DATA_DIR"


class DataError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, ...]


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.uint8:
        return 1
    if arr.dtype == np.float32:
        return 0
    raise DataError(f"unsupported volume dtype {arr.dtype}; use float32 or uint8")


def volume_bytes(data: np.ndarray, spacing=None) -> bytes:
    data = np.asarray(data)
    code = _dtype_code(data)
    spacing = (1.0,) * data.ndim if spacing is None else tuple(spacing)
    if len(spacing) != data.ndim:
        raise DataError(f"spacing has {len(spacing)} values for a rank-{data.ndim} volume")
    header = MAGIC + struct.pack(f"<III{data.ndim}I{data.ndim}f", VERSION, code, data.ndim,
                                 *data.shape, *spacing)
    return header + np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes()


def write_volume(path, data: np.ndarray, spacing=None) -> None:
    Path(path).write_bytes(volume_bytes(data, spacing))


def _parse_header(buf: bytes, path) -> tuple[int, tuple[int, ...], tuple[float, ...], int]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise DataError(f"{path}: not a volume file (bad magic)")
    version, code, rank = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported volume version {version}")
    if code not in DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    end = 16 + 8 * rank
    if rank < 1 or len(buf) < end:
        raise DataError(f"{path}: truncated header")
    extents = struct.unpack_from(f"<{rank}I", buf, 16)
    spacing = struct.unpack_from(f"<{rank}f", buf, 16 + 4 * rank)
    return code, tuple(extents), tuple(float(s) for s in spacing), end


def read_header(path) -> tuple[tuple[int, ...], tuple[float, ...]]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) == 16 and head[:4] == MAGIC:
            rank = struct.unpack_from("<I", head, 12)[0]
            head += fh.read(8 * rank)
    _, extents, spacing, _ = _parse_header(head, path)
    return extents, spacing


def read_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    code, extents, spacing, start = _parse_header(buf, path)
    dtype = DTYPES[code]
    count = int(np.prod(extents))
    if len(buf) - start != count * dtype.itemsize:
        raise DataError(
            f"{path}: payload is {len(buf) - start} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(buf, dtype=dtype, offset=start).reshape(extents)
    return Volume(data.astype(dtype.newbyteorder("=")), spacing)


# -------------------------------------------------------------- manifests

@dataclass
class CaseManifest:
    case_id: str
    images: dict[str, str]  # modality -> path, relative to the dataset root
    label: str | None = None
    grade: str | None = None

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.images]
        if missing:
            raise DataError(f"case {self.case_id}: missing modalities {missing}")
        if self.grade not in (None, "HGG", "LGG"):
            raise DataError(f"case {self.case_id}: grade must be HGG or LGG, got {self.grade!r}")

    def paths(self, root) -> list[Path]:
        out = [Path(root) / self.images[m] for m in MODALITIES]
        if self.label is not None:
            out.append(Path(root) / self.label)
        return out

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "images": {m: self.images[m] for m in MODALITIES},
                "label": self.label, "grade": self.grade}


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def save_dataset(root, cases: list[CaseManifest]) -> Path:
    path = Path(root) / "dataset.json"
    path.write_text(json.dumps({"format": DATASET_FORMAT, "modalities": list(MODALITIES),
                                "cases": [c.to_dict() for c in cases]}, indent=2) + "\n")
    return path


def load_dataset(root, validate: bool = True) -> list[CaseManifest]:
    """Read ``root/dataset.json``; with ``validate``, check every header up front."""
    path = Path(root) / "dataset.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no dataset manifest") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: unsupported dataset format {doc.get('format')!r}")
    try:
        cases = [CaseManifest(**c) for c in doc["cases"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed case entry ({exc})") from exc
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate case ids")
    if validate:
        for case in cases:
            validate_case(case, root)
    return cases


def validate_case(case: CaseManifest, root) -> tuple[tuple[int, ...], tuple[float, ...]]:
    headers = []
    for p in case.paths(root):
        if not p.exists():
            raise DataError(f"case {case.case_id}: missing file {p}")
        headers.append((p, *read_header(p)))
    _, extents, spacing = headers[0]
    for p, e, s in headers[1:]:
        if e != extents:
            raise DataError(f"case {case.case_id}: {p.name} has extents {e}, expected {extents}")
        if not np.allclose(s, spacing):
            raise DataError(f"case {case.case_id}: {p.name} has spacing {s}, expected {spacing}")
    if len(extents) != 3:
        raise DataError(f"case {case.case_id}: volumes must be 3D, got extents {extents}")
    return extents, spacing


def load_case(case: CaseManifest, root):
    """Return ``(images (4, D, H, W) float32, labels or None, spacing)``."""
    vols = [read_volume(p) for p in case.paths(root)[:len(MODALITIES)]]
    images = np.stack([v.data.astype(np.float32) for v in vols])
    labels = read_volume(Path(root) / case.label).data if case.label else None
    return images, labels, vols[0].spacing


def load_arrays(root, cases: list[CaseManifest] | None = None):
    cases = load_dataset(root) if cases is None else cases
    loaded = [load_case(c, root) for c in cases]
    images = np.stack([l[0] for l in loaded])
    labels = np.stack([l[1] for l in loaded]) if all(l[1] is not None for l in loaded) else None
    return images, labels, cases


# --------------------------------------------------------------- phantoms

# mean intensity per modality for (healthy tissue, NCR 1, ED 2, ET 4)
_PROFILE = {
    "T1": (0.55, 0.25, 0.45, 0.35),
    "T1Gd": (0.55, 0.25, 0.50, 1.00),
    "T2": (0.40, 0.75, 0.95, 0.60),
    "FLAIR": (0.35, 0.60, 1.00, 0.65),
}
_ET_SCALE = {"HGG": 0.75, "LGG": 0.5}
MIN_PHANTOM_EXTENT = 16


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def synth_case(rng, dims=(32, 32, 32), grade: str = "HGG", noise: float = 0.05):
    """One phantom: ``(images (4, D, H, W) float32, labels (D, H, W) uint8)``.

    Nested ellipsoids give edema (2) around tumor core (1) around enhancing
    tumor (4); HGG cases have a proportionally larger enhancing core.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_EXTENT:
        raise DataError(f"phantom extents must be >= {MIN_PHANTOM_EXTENT}, got {dims}")
    rng = make_rng(rng)
    d = np.asarray(dims, dtype=np.float64)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    head = _ellipsoid(grid, (d - 1) / 2, 0.46 * d)
    center = (d - 1) / 2 + rng.uniform(-0.1, 0.1, 3) * d
    wt_r = rng.uniform(0.2, 0.27, 3) * d
    tc_r = wt_r * rng.uniform(0.6, 0.72)
    et_r = tc_r * _ET_SCALE[grade] * rng.uniform(0.95, 1.05)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[_ellipsoid(grid, center, wt_r)] = 2
    labels[_ellipsoid(grid, center, tc_r)] = 1
    labels[_ellipsoid(grid, center, et_r)] = 4
    labels[~head] = 0
    lut_index = np.select([labels == 1, labels == 2, labels == 4], [1, 2, 3], 0)
    bias = 1.0 + 0.1 * (grid[0] / d[0] - 0.5) * rng.uniform(-1, 1)
    images = np.empty((len(MODALITIES),) + dims, dtype=np.float32)
    for m, name in enumerate(MODALITIES):
        vol = np.asarray(_PROFILE[name])[lut_index] * bias
        vol = vol + noise * rng.standard_normal(dims)
        vol[~head] = 0.0
        images[m] = vol
    return images, labels


def make_phantoms(n_cases: int, dims=(32, 32, 32), seed=0, hgg_fraction: float = 0.5):
    """In-memory phantom set: ``(images, labels, grades)``."""
    rng = make_rng(seed)
    n_hgg = int(round(n_cases * hgg_fraction))
    grades = ["HGG"] * n_hgg + ["LGG"] * (n_cases - n_hgg)
    grades = [grades[i] for i in rng.permutation(n_cases)]
    cases = [synth_case(rng, dims, g) for g in grades]
    images = np.stack([c[0] for c in cases])
    labels = np.stack([c[1] for c in cases])
    return images, labels, grades


def synth_dataset(root, n_cases: int, dims=(32, 32, 32), seed=0,
                  hgg_fraction: float = 0.5, spacing=(1.0, 1.0, 1.0)) -> list[CaseManifest]:
    """Write a phantom dataset (volume files + ``dataset.json``) under ``root``."""
    images, labels, grades = make_phantoms(n_cases, dims, seed, hgg_fraction)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for i, (img, lab, grade) in enumerate(zip(images, labels, grades)):
        cid = f"case_{i:03d}"
        (root / cid).mkdir(exist_ok=True)
        paths = {}
        for m, name in enumerate(MODALITIES):
            rel = f"{cid}/{name}.acsv"
            write_volume(root / rel, img[m], spacing)
            paths[name] = rel
        write_volume(root / f"{cid}/seg.acsv", lab, spacing)
        cases.append(CaseManifest(cid, paths, f"{cid}/seg.acsv", grade))
    save_dataset(root, cases)
    return cases
