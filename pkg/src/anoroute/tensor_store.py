"""AVAF binary tensor container and the dataset/text-bank loaders built on it.

Wire layout (all integers little-endian):

    magic "AVAF" | version u32 (=1) | metadata_count u32
    per metadata entry: key_len u32, key (utf-8), val_len u32, val (utf-8)
    entry_count u32
    per tensor entry: name_len u32, name (utf-8), dtype u8, ndim u8,
                      dims (u64 each), raw row-major payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8. One container format is
reused for feature datasets, text banks, checkpoints and prediction dumps;
the metadata key "kind" tells them apart.

Feature tensors follow the naming scheme ``img{i}/layer{l}/patch``,
``img{i}/cls``, ``img{i}/mask``, ``img{i}/label``, ``img{i}/class``;
text banks use ``class{c}/t_n``, ``class{c}/t_a`` plus a ``class{c}/name``
metadata entry.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"AVAF"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class TensorContainer:
    """In-memory view of one AVAF file: string metadata plus named tensors.

    ``entries`` preserves insertion order, which is also the on-disk order.
    """

    metadata: dict[str, str] = field(default_factory=dict)
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.entries:
            raise ValidationError(f"duplicate tensor name {name!r}")
        self.entries[name] = array

    def require(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise ValidationError(f"missing tensor {name!r}") from None

    def kind(self) -> str:
        return self.metadata.get("kind", "")


def _check_entry(name: str, array: np.ndarray) -> np.ndarray:
    if array.dtype not in _DTYPE_CODES:
        raise ValidationError(f"tensor {name!r}: unsupported dtype {array.dtype}")
    if array.ndim == 0:
        raise ValidationError(f"tensor {name!r}: dims must be non-empty")
    if any(d < 1 for d in array.shape):
        raise ValidationError(f"tensor {name!r}: every extent must be >= 1")
    arr = np.ascontiguousarray(array)
    expected = math.prod(arr.shape) * arr.dtype.itemsize
    if arr.nbytes != expected:
        raise ValidationError(
            f"tensor {name!r}: payload is {arr.nbytes} bytes, dims imply {expected}"
        )
    return arr


def write_container(path: str | Path, container: TensorContainer) -> None:
    """Serialize ``container`` to ``path``; validates before writing anything."""
    checked = [(name, _check_entry(name, arr)) for name, arr in container.entries.items()]
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(container.metadata))]
    for key, value in container.metadata.items():
        kb, vb = key.encode("utf-8"), str(value).encode("utf-8")
        parts += [_U32.pack(len(kb)), kb, _U32.pack(len(vb)), vb]
    parts.append(_U32.pack(len(checked)))
    for name, arr in checked:
        nb = name.encode("utf-8")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts += [_U32.pack(len(nb)), nb, bytes([_DTYPE_CODES[arr.dtype], arr.ndim])]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(le.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def utf8(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: invalid utf-8 in {what}") from exc


def read_container(path: str | Path) -> TensorContainer:
    """Parse an AVAF file; exact inverse of :func:`write_container`."""
    path = Path(path)
    rd = _Reader(path.read_bytes(), path)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic (not an AVAF container)")
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    container = TensorContainer()
    for _ in range(rd.u32("metadata count")):
        key = rd.utf8("metadata key")
        container.metadata[key] = rd.utf8(f"metadata value for {key!r}")
    for _ in range(rd.u32("entry count")):
        name = rd.utf8("entry name")
        if name in container.entries:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        code, ndim = rd.take(2, f"header of {name!r}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name!r}")
        if ndim == 0:
            raise FormatError(f"{path}: tensor {name!r} has zero dims")
        dims = tuple(rd.u64(f"dims of {name!r}") for _ in range(ndim))
        if any(d < 1 for d in dims):
            raise FormatError(f"{path}: tensor {name!r} has a zero extent")
        dtype = _CODE_DTYPES[code]
        payload = rd.take(math.prod(dims) * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        container.entries[name] = arr.astype(dtype.newbyteorder("="))
    if rd.pos != len(rd.buf):
        raise FormatError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes after last entry")
    return container


def containers_equal(a: TensorContainer, b: TensorContainer) -> bool:
    """Value equality: same metadata map, same entries in order, bitwise payloads."""
    if a.metadata != b.metadata or list(a.entries) != list(b.entries):
        return False
    for name, arr in a.entries.items():
        other = b.entries[name]
        if arr.dtype != other.dtype or arr.shape != other.shape:
            return False
        if arr.tobytes() != other.tobytes():
            return False
    return True


# --------------------------------------------------------------------------
# Feature datasets and text banks on top of the raw container
# --------------------------------------------------------------------------

@dataclass
class FeatureRecord:
    """Frozen multi-layer patch tokens for one image plus its supervision.

    ``patch_tokens`` maps extraction-layer id to an [N, D_vis] float64 array
    with N a perfect square. ``mask_grid`` is the ground truth pooled to the
    patch grid; ``mask_full`` keeps the stored resolution for evaluation.
    """

    index: int
    patch_tokens: dict[int, np.ndarray]
    cls_token: np.ndarray
    mask_grid: np.ndarray
    mask_full: np.ndarray
    label: int
    class_id: int

    @property
    def n_patches(self) -> int:
        return next(iter(self.patch_tokens.values())).shape[0]

    @property
    def d_vis(self) -> int:
        return self.cls_token.shape[0]

    @property
    def grid_size(self) -> int:
        return self.mask_grid.shape[0]

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self.patch_tokens)


@dataclass
class TextEntry:
    name: str
    normal_embed: np.ndarray
    anomaly_embed: np.ndarray


@dataclass
class TextBank:
    """Per-class pair of text embeddings anchoring the normal/anomalous states."""

    classes: list[TextEntry]

    @property
    def d_text(self) -> int:
        return self.classes[0].normal_embed.shape[0]

    def __len__(self) -> int:
        return len(self.classes)


def pool_mask_to_grid(mask: np.ndarray, grid: int) -> np.ndarray:
    """Max-pool a binary mask onto a ``grid`` x ``grid`` patch grid.

    A patch is anomalous when any pixel mapping into it is. Identity when the
    mask is already at grid resolution.
    """
    h, w = mask.shape
    if (h, w) == (grid, grid):
        return mask.astype(np.uint8)
    rows = (np.arange(h) * grid) // h
    cols = (np.arange(w) * grid) // w
    out = np.zeros((grid, grid), dtype=np.uint8)
    np.maximum.at(out, (rows[:, None], cols[None, :]), mask.astype(np.uint8))
    return out


def _as_float(container: TensorContainer, name: str) -> np.ndarray:
    arr = container.require(name)
    if arr.dtype not in (np.float32, np.float64):
        raise ValidationError(f"tensor {name!r}: expected a float tensor, got {arr.dtype}")
    return arr.astype(np.float64)


def _as_scalar_int(container: TensorContainer, name: str) -> int:
    arr = container.require(name)
    if arr.size != 1:
        raise ValidationError(f"tensor {name!r}: expected a scalar")
    value = float(arr.reshape(-1)[0])
    if value != int(value):
        raise ValidationError(f"tensor {name!r}: expected an integer, got {value}")
    return int(value)


_IMG_RE = re.compile(r"^img(\d+)/")
_CLASS_RE = re.compile(r"^class(\d+)/")


def parse_feature_container(container: TensorContainer) -> list[FeatureRecord]:
    """Decode ``img{i}/...`` tensors into validated FeatureRecords."""
    if container.kind() != "features":
        raise ValidationError(f"expected kind=features container, got {container.kind()!r}")
    indices = sorted({int(m.group(1)) for name in container.entries if (m := _IMG_RE.match(name))})
    if not indices:
        raise ValidationError("feature container holds no img{i}/ tensors")
    if indices != list(range(len(indices))):
        raise ValidationError("image indices must be contiguous from 0")

    records = []
    for i in indices:
        layer_ids = sorted(
            int(m.group(1))
            for name in container.entries
            if (m := re.match(rf"^img{i}/layer(\d+)/patch$", name))
        )
        if not layer_ids:
            raise ValidationError(f"img{i}: no patch-token layers found")
        patches = {}
        for lid in layer_ids:
            arr = _as_float(container, f"img{i}/layer{lid}/patch")
            if arr.ndim != 2:
                raise ValidationError(f"img{i}/layer{lid}/patch: expected 2 dims")
            patches[lid] = arr
        cls_token = _as_float(container, f"img{i}/cls")
        if cls_token.ndim != 1:
            raise ValidationError(f"img{i}/cls: expected 1 dim")
        mask = container.require(f"img{i}/mask")
        if mask.ndim != 2:
            raise ValidationError(f"img{i}/mask: expected 2 dims")
        mask = mask.astype(np.float64)
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValidationError(f"img{i}/mask: values must be 0 or 1")
        mask_full = mask.astype(np.uint8)
        label = _as_scalar_int(container, f"img{i}/label")
        class_id = _as_scalar_int(container, f"img{i}/class")
        if label not in (0, 1):
            raise ValidationError(f"img{i}/label: must be 0 or 1, got {label}")

        n_patch = patches[layer_ids[0]].shape[0]
        d_vis = patches[layer_ids[0]].shape[1]
        grid = math.isqrt(n_patch)
        if grid * grid != n_patch:
            raise ValidationError(f"img{i}: patch count {n_patch} is not a perfect square")
        for lid, arr in patches.items():
            if arr.shape != (n_patch, d_vis):
                raise ValidationError(
                    f"img{i}/layer{lid}/patch: shape {arr.shape} disagrees with "
                    f"({n_patch}, {d_vis})"
                )
        if cls_token.shape[0] != d_vis:
            raise ValidationError(f"img{i}/cls: dim {cls_token.shape[0]} != D_vis {d_vis}")
        if mask_full.shape[0] < grid or mask_full.shape[1] < grid:
            raise ValidationError(
                f"img{i}/mask: resolution {mask_full.shape} below the {grid}x{grid} patch grid"
            )
        if label != int(mask_full.any()):
            raise ValidationError(f"img{i}: label {label} inconsistent with mask any={int(mask_full.any())}")
        records.append(
            FeatureRecord(
                index=i,
                patch_tokens=patches,
                cls_token=cls_token,
                mask_grid=pool_mask_to_grid(mask_full, grid),
                mask_full=mask_full,
                label=label,
                class_id=class_id,
            )
        )
    return records


def parse_textbank_container(container: TensorContainer) -> TextBank:
    if container.kind() != "textbank":
        raise ValidationError(f"expected kind=textbank container, got {container.kind()!r}")
    ids = sorted({int(m.group(1)) for name in container.entries if (m := _CLASS_RE.match(name))})
    if not ids:
        raise ValidationError("text bank holds no class{c}/ tensors")
    if ids != list(range(len(ids))):
        raise ValidationError("class ids must be contiguous from 0")
    classes = []
    for c in ids:
        t_n = _as_float(container, f"class{c}/t_n")
        t_a = _as_float(container, f"class{c}/t_a")
        if t_n.ndim != 1 or t_a.ndim != 1:
            raise ValidationError(f"class{c}: text embeddings must be vectors")
        if t_n.shape != t_a.shape:
            raise ValidationError(f"class{c}: t_n and t_a dims differ")
        for tag, vec in (("t_n", t_n), ("t_a", t_a)):
            if not np.any(vec):
                raise ValidationError(f"class{c}/{tag}: all-zero embedding")
        name = container.metadata.get(f"class{c}/name", f"class{c}")
        classes.append(TextEntry(name=name, normal_embed=t_n, anomaly_embed=t_a))
    d_text = classes[0].normal_embed.shape[0]
    for c, entry in enumerate(classes):
        if entry.normal_embed.shape[0] != d_text:
            raise ValidationError(f"class{c}: D_text {entry.normal_embed.shape[0]} != {d_text}")
    return TextBank(classes=classes)


def load_dataset(features_path: str | Path, textbank_path: str | Path) -> tuple[list[FeatureRecord], TextBank]:
    """Load and cross-validate a feature dataset against its text bank."""
    records = parse_feature_container(read_container(features_path))
    bank = parse_textbank_container(read_container(textbank_path))
    first = records[0]
    for rec in records:
        if rec.d_vis != first.d_vis:
            raise ValidationError(
                f"img{rec.index}: D_vis {rec.d_vis} inconsistent with img{first.index}'s {first.d_vis}"
            )
        if rec.n_patches != first.n_patches:
            raise ValidationError(
                f"img{rec.index}: patch count {rec.n_patches} inconsistent with {first.n_patches}"
            )
        if rec.layer_ids != first.layer_ids:
            raise ValidationError(f"img{rec.index}: layer set {rec.layer_ids} != {first.layer_ids}")
        if not (0 <= rec.class_id < len(bank)):
            raise ValidationError(
                f"img{rec.index}: class_id {rec.class_id} has no entry in the {len(bank)}-class text bank"
            )
    return records, bank


def features_to_container(records: list[FeatureRecord], extra_metadata: dict[str, str] | None = None) -> TensorContainer:
    """Pack FeatureRecords into a kind=features container (float32 on disk)."""
    container = TensorContainer(metadata={"kind": "features"})
    container.metadata.update(extra_metadata or {})
    for i, rec in enumerate(records):
        for lid in rec.layer_ids:
            container.add(f"img{i}/layer{lid}/patch", rec.patch_tokens[lid].astype(np.float32))
        container.add(f"img{i}/cls", rec.cls_token.astype(np.float32))
        container.add(f"img{i}/mask", rec.mask_full.astype(np.uint8))
        container.add(f"img{i}/label", np.array([rec.label], dtype=np.uint8))
        container.add(f"img{i}/class", np.array([rec.class_id], dtype=np.uint8))
    return container


def textbank_to_container(bank: TextBank) -> TensorContainer:
    container = TensorContainer(metadata={"kind": "textbank"})
    for c, entry in enumerate(bank.classes):
        container.add(f"class{c}/t_n", entry.normal_embed.astype(np.float32))
        container.add(f"class{c}/t_a", entry.anomaly_embed.astype(np.float32))
        container.metadata[f"class{c}/name"] = entry.name
    return container
