"""Volume data model, normalization, resampling, splitting and file I/O.

Statistic maps are plain 3D float arrays tagged with a pipeline (domain)
label, a group id and a task id. All numeric operations here are pure
functions; nothing mutates its inputs.

On-disk interchange is a canonical pair of files: ``<stem>.json`` holding the
header and ``<stem>.f32`` holding the voxel payload as little-endian float32
in x-fastest order. The pair is byte-stable: identical inputs produce
identical bytes, which the test suite relies on.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    ConstantVolume,
    DuplicateGroup,
    EmptyInput,
    InvalidShape,
    IoFailure,
    NotNormalized,
    ShapeMismatch,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DomainLabel:
    """A pipeline identity: a dense index plus a ``<software>-<derivatives>`` name."""

    index: int
    name: str

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"domain index must be >= 0, got {self.index}")


@dataclass(frozen=True)
class NormParams:
    """Pre-normalization in-mask extrema, kept so maps can be de-normalized."""

    vmin: float
    vmax: float

    def __post_init__(self):
        if not self.vmax > self.vmin:
            raise ValueError(f"vmax must exceed vmin, got ({self.vmin}, {self.vmax})")


@dataclass
class StatMap:
    """One 3D statistic volume with its metadata."""

    voxels: np.ndarray
    domain: DomainLabel
    group_id: str
    task_id: str
    normalized: bool = False
    norm_params: NormParams | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.dtype not in (np.float32, np.float64):
            self.voxels = self.voxels.astype(np.float32)
        if self.voxels.ndim != 3:
            raise InvalidShape(f"expected a 3D voxel grid, got ndim={self.voxels.ndim}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "StatMap":
        return replace(self, voxels=np.asarray(voxels), **changes)


@dataclass
class Mask:
    """Binary voxel support, e.g. the intersection mask of all groups."""

    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=bool)
        if self.voxels.ndim != 3:
            raise InvalidShape(f"expected a 3D mask, got ndim={self.voxels.ndim}")
        if not self.voxels.any():
            raise InvalidShape("mask has no true voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @classmethod
    def full(cls, shape: tuple[int, int, int]) -> "Mask":
        return cls(np.ones(shape, dtype=bool))


@dataclass(frozen=True)
class DatasetSplit:
    """Group-level train/test partition."""

    train_groups: frozenset[str]
    test_groups: frozenset[str]
    seed: int

    def __post_init__(self):
        if self.train_groups & self.test_groups:
            raise ValueError("train and test groups overlap")


def _check_same_shape(a_shape, b_shape, what="mask"):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeMismatch(f"{what} shape {tuple(b_shape)} does not match map shape {tuple(a_shape)}")


def minmax_normalize(smap: StatMap, mask: Mask) -> tuple[StatMap, NormParams]:
    """Affinely map in-mask voxels onto [-1, 1]; zero everything outside.

    The extrema are computed over in-mask voxels only, so background values
    cannot distort the mapping.
    """
    if smap.normalized:
        raise ValueError("map is already normalized")
    _check_same_shape(smap.shape, mask.shape)
    m = mask.voxels
    vals = smap.voxels[m]
    vmin = float(vals.min())
    vmax = float(vals.max())
    if vmax - vmin < 1e-12:
        raise ConstantVolume(f"in-mask values are constant ({vmin}); cannot normalize")
    out = np.zeros_like(smap.voxels)
    out[m] = 2.0 * (smap.voxels[m] - vmin) / (vmax - vmin) - 1.0
    params = NormParams(vmin=vmin, vmax=vmax)
    return smap.with_voxels(out, normalized=True, norm_params=params), params


def denormalize(smap: StatMap, params: NormParams) -> StatMap:
    """Invert :func:`minmax_normalize` using the recorded extrema."""
    if not smap.normalized:
        raise NotNormalized("map is not normalized")
    out = (smap.voxels + 1.0) / 2.0 * (params.vmax - params.vmin) + params.vmin
    return smap.with_voxels(out, normalized=False, norm_params=None)


def resample(smap: StatMap, target_shape: tuple[int, int, int]) -> StatMap:
    """Trilinear resampling over the normalized coordinate cube [0, 1]^3.

    Both grids place voxel i of an n-long axis at i/(n-1); sampling outside
    the source cube clamps to the edge.
    """
    src_shape = smap.shape
    if any(d < 2 for d in src_shape) or any(d < 2 for d in target_shape):
        raise InvalidShape(f"all dimensions must be >= 2, got {src_shape} -> {tuple(target_shape)}")
    if tuple(target_shape) == src_shape:
        return smap.with_voxels(smap.voxels.copy())
    axes = [
        np.linspace(0.0, 1.0, n_t) * (n_s - 1)
        for n_t, n_s in zip(target_shape, src_shape)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    out = map_coordinates(smap.voxels.astype(np.float64), coords, order=1, mode="nearest")
    return smap.with_voxels(out.reshape(target_shape))


def split_groups(group_ids: list[str], train_fraction: float, seed: int) -> DatasetSplit:
    """Seeded shuffle of the group ids; first floor(n * fraction) go to train."""
    if not group_ids:
        raise EmptyInput("group_ids is empty")
    if len(set(group_ids)) != len(group_ids):
        raise DuplicateGroup("group_ids contains duplicates")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(group_ids))
    n_train = int(np.floor(len(group_ids) * train_fraction))
    shuffled = [group_ids[i] for i in order]
    return DatasetSplit(
        train_groups=frozenset(shuffled[:n_train]),
        test_groups=frozenset(shuffled[n_train:]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Canonical file format
# ---------------------------------------------------------------------------

def _payload_path(header_path: str) -> str:
    stem, ext = os.path.splitext(header_path)
    if ext != ".json":
        raise IoFailure(f"canonical header path must end in .json, got {header_path}")
    return stem + ".f32"


def _header_dict(smap: StatMap) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "shape": list(smap.shape),
        "dtype": "f32le",
        "domain": {"index": smap.domain.index, "name": smap.domain.name},
        "group_id": smap.group_id,
        "task_id": smap.task_id,
        "normalized": smap.normalized,
        "norm_params": (
            None
            if smap.norm_params is None
            else {"vmin": smap.norm_params.vmin, "vmax": smap.norm_params.vmax}
        ),
    }


def save_canonical(smap: StatMap, header_path: str) -> None:
    """Write the header/payload pair. Byte-identical for identical inputs."""
    payload = _payload_path(header_path)
    header = json.dumps(_header_dict(smap), sort_keys=True, indent=2) + "\n"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(header_path)), exist_ok=True)
        with open(header_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header)
        # x-fastest linear order == Fortran order for an (nx, ny, nz) array
        with open(payload, "wb") as fb:
            fb.write(np.ascontiguousarray(smap.voxels, dtype="<f4").tobytes(order="F"))
    except OSError as exc:
        raise IoFailure(f"cannot write {header_path}: {exc}") from exc


def load_canonical(header_path: str) -> StatMap:
    try:
        with open(header_path, "r", encoding="utf-8") as fh:
            hdr = json.load(fh)
        raw = open(_payload_path(header_path), "rb").read()
    except OSError as exc:
        raise IoFailure(f"cannot read {header_path}: {exc}") from exc
    if hdr.get("schema_version") != SCHEMA_VERSION:
        raise IoFailure(f"unsupported schema_version {hdr.get('schema_version')}")
    if hdr.get("dtype") != "f32le":
        raise IoFailure(f"unsupported dtype {hdr.get('dtype')}")
    shape = tuple(hdr["shape"])
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise IoFailure(f"payload holds {len(raw)} bytes, expected {4 * n}")
    voxels = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F")
    np_hdr = hdr.get("norm_params")
    return StatMap(
        voxels=voxels.copy(),
        domain=DomainLabel(index=hdr["domain"]["index"], name=hdr["domain"]["name"]),
        group_id=hdr["group_id"],
        task_id=hdr["task_id"],
        normalized=bool(hdr["normalized"]),
        norm_params=None if np_hdr is None else NormParams(np_hdr["vmin"], np_hdr["vmax"]),
    )


def save_mask(mask: Mask, header_path: str) -> None:
    as_map = StatMap(
        voxels=mask.voxels.astype(np.float32),
        domain=DomainLabel(0, "mask"),
        group_id="mask",
        task_id="mask",
    )
    save_canonical(as_map, header_path)


def load_mask(header_path: str) -> Mask:
    return Mask(load_canonical(header_path).voxels > 0.5)


# ---------------------------------------------------------------------------
# NIfTI-1 import
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}


def read_nifti(path: str) -> np.ndarray:
    """Read a single-file NIfTI-1 volume (optionally gzipped) as float32.

    Only the voxel grid and the scl_slope/scl_inter scaling are honoured;
    orientation and any remaining header metadata are dropped.
    """
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < 352:
        raise IoFailure(f"{path}: too short to be a NIfTI-1 file")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    endian = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack_from(">i", blob, 0)[0]
        if sizeof_hdr != 348:
            raise IoFailure(f"{path}: bad sizeof_hdr, not NIfTI-1")
        endian = ">"
    magic = blob[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise IoFailure(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3:
        raise IoFailure(f"{path}: expected at least 3 dimensions, got {ndim}")
    shape = tuple(int(d) for d in dim[1:4])
    extra = [int(d) for d in dim[4 : 1 + ndim]]
    if any(d > 1 for d in extra):
        raise IoFailure(f"{path}: only single-volume files are supported, trailing dims {extra}")
    datatype = struct.unpack_from(endian + "h", blob, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise IoFailure(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    vox_offset = int(struct.unpack_from(endian + "f", blob, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)
    n = int(np.prod(shape))
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=vox_offset)
    # NIfTI stores x-fastest
    vol = data.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * np.float32(slope) + np.float32(scl_inter)
    return vol


def import_nifti(
    path: str,
    out_header_path: str,
    domain: DomainLabel,
    group_id: str,
    task_id: str,
) -> StatMap:
    """One-way import of a NIfTI-1 volume into a canonical file pair."""
    smap = StatMap(voxels=read_nifti(path), domain=domain, group_id=group_id, task_id=task_id)
    save_canonical(smap, out_header_path)
    return smap


def intersection_mask(maps: list[StatMap]) -> Mask:
    """Voxels that are nonzero and finite in every map."""
    if not maps:
        raise EmptyInput("no maps given")
    acc = np.ones(maps[0].shape, dtype=bool)
    for m in maps:
        _check_same_shape(maps[0].shape, m.shape, what="map")
        acc &= np.isfinite(m.voxels) & (m.voxels != 0)
    return Mask(acc)
