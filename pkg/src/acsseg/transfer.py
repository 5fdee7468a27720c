"""Weight stores, 2D-to-3D weight transfer, and checkpoints.

Store file layout (all integers little-endian)::

    b"ACSW"                magic
    u32                    format version (1)
    u64                    manifest length in bytes
    manifest               UTF-8 text, one record per line:
                             origin<TAB><tag>
                             <name><TAB><d0,d1,...><TAB><byte offset><TAB><flag>
    blob                   float32 little-endian values

``flag`` is ``param``, ``frozen`` or ``buffer`` (running statistics).
Entry order is network depth order, which is what the transfer strategies
treat as "connected".
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import ACSConv, Conv3d, Module

MAGIC = b"ACSW"
VERSION = 1
FLAGS = ("param", "frozen", "buffer")


class StoreError(ValueError):
    pass


def kaiming_init(shape, rng: np.random.Generator, slope: float = 0.01) -> np.ndarray:
    """Zero-mean normal draws with std ``sqrt(2 / ((1 + slope**2) * fan_in))``.

    ``fan_in`` is ``shape[1] * prod(shape[2:])`` (input channels times kernel size).
    """
    shape = tuple(shape)
    fan_in = shape[1] * int(np.prod(shape[2:], dtype=np.int64)) if len(shape) > 1 else shape[0]
    std = np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


@dataclass
class StoreEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    flag: str = "param"

    @property
    def nbytes(self) -> int:
        return 4 * int(np.prod(self.shape, dtype=np.int64))


@dataclass
class WeightStore:
    entries: list[StoreEntry] = field(default_factory=list)
    blob: bytes = b""
    origin: str = "unknown"

    def __post_init__(self):
        self._index = {e.name: i for i, e in enumerate(self.entries)}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> StoreEntry:
        return self.entries[self._index[name]]

    def array(self, name: str) -> np.ndarray:
        e = self.entry(name)
        return np.frombuffer(self.blob, dtype="<f4", count=e.nbytes // 4,
                             offset=e.offset).reshape(e.shape).astype(np.float32)

    @classmethod
    def from_arrays(cls, items, origin: str = "unknown") -> "WeightStore":
        """Pack ``(name, array[, flag])`` items contiguously, in order."""
        entries, chunks, offset = [], [], 0
        for item in items:
            name, arr = item[0], item[1]
            flag = item[2] if len(item) > 2 else "param"
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(StoreEntry(name, tuple(int(n) for n in np.shape(arr)), offset, flag))
            chunks.append(data)
            offset += len(data)
        store = cls(entries, b"".join(chunks), origin)
        _validate(store)
        return store

    def to_bytes(self) -> bytes:
        lines = [f"origin\t{self.origin}"]
        for e in self.entries:
            lines.append(f"{e.name}\t{','.join(map(str, e.shape))}\t{e.offset}\t{e.flag}")
        manifest = ("\n".join(lines) + "\n").encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(manifest)) + manifest + self.blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        if len(data) < 16 or data[:4] != MAGIC:
            raise StoreError("not a weight store (bad magic)")
        version, mlen = struct.unpack_from("<IQ", data, 4)
        if version != VERSION:
            raise StoreError(f"unsupported store version {version}")
        if 16 + mlen > len(data):
            raise StoreError("truncated manifest")
        try:
            text = data[16:16 + mlen].decode()
        except UnicodeDecodeError as exc:
            raise StoreError("manifest is not UTF-8") from exc
        origin, entries = "unknown", []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "origin" and len(parts) == 2:
                origin = parts[1]
                continue
            if len(parts) != 4:
                raise StoreError(f"manifest line {lineno}: expected 4 fields, got {len(parts)}")
            name, shape, offset, flag = parts
            try:
                dims = tuple(int(n) for n in shape.split(",")) if shape else ()
                off = int(offset)
            except ValueError as exc:
                raise StoreError(f"manifest line {lineno}: {exc}") from exc
            if flag not in FLAGS:
                raise StoreError(f"manifest line {lineno}: unknown flag {flag!r}")
            entries.append(StoreEntry(name, dims, off, flag))
        store = cls(entries, data[16 + mlen:], origin)
        _validate(store)
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _validate(store: WeightStore) -> None:
    seen = set()
    end = 0
    for e in store.entries:
        if e.name in seen:
            raise StoreError(f"duplicate entry name {e.name!r}")
        seen.add(e.name)
        if any(n < 1 for n in e.shape):
            raise StoreError(f"{e.name}: non-positive extent in shape {e.shape}")
        if e.offset < end:
            raise StoreError(f"{e.name}: offset {e.offset} overlaps or precedes previous entry")
        end = e.offset + e.nbytes
    if end > len(store.blob):
        raise StoreError(f"truncated blob: entries need {end} bytes, blob has {len(store.blob)}")


def load_store(path) -> WeightStore:
    return WeightStore.from_bytes(Path(path).read_bytes())


def resnet18_store(seed=0) -> WeightStore:
    """A store shaped like torchvision's ResNet18 (20 convolutions + fc weight).

    Values are seeded Kaiming draws; this is a test fixture, not ImageNet.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    items = [("conv1.weight", kaiming_init((64, 3, 7, 7), rng, 0.0))]
    in_ch = 64
    for stage, ch in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            first_in = in_ch if block == 0 else ch
            pre = f"layer{stage}.{block}"
            items.append((f"{pre}.conv1.weight", kaiming_init((ch, first_in, 3, 3), rng, 0.0)))
            items.append((f"{pre}.conv2.weight", kaiming_init((ch, ch, 3, 3), rng, 0.0)))
            if block == 0 and stage > 1:
                items.append((f"{pre}.downsample.0.weight",
                              kaiming_init((ch, in_ch, 1, 1), rng, 0.0)))
        in_ch = ch
    items.append(("fc.weight", kaiming_init((1000, 512), rng, 0.0)))
    return WeightStore.from_arrays(items, origin="resnet18-fixture")


# ---------------------------------------------------------------- transfer

@dataclass
class MatchRecord:
    target: str
    strategy: str  # exact | slice | kaiming
    source: str | None = None
    slices: tuple[tuple[int, int], ...] | None = None
    target_shape: tuple[int, ...] = ()
    source_shape: tuple[int, ...] | None = None


@dataclass
class MatchReport:
    records: list[MatchRecord]

    def by_strategy(self, strategy: str) -> list[MatchRecord]:
        return [r for r in self.records if r.strategy == strategy]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def format(self) -> str:
        rows = ["target\tstrategy\tsource\ttarget_shape\tsource_slices"]
        for r in self.records:
            sl = "" if r.slices is None else ",".join(f"{a}:{b}" for a, b in r.slices)
            rows.append(f"{r.target}\t{r.strategy}\t{r.source or '-'}\t"
                        f"{'x'.join(map(str, r.target_shape))}\t{sl or '-'}")
        counts = {s: len(self.by_strategy(s)) for s in ("exact", "slice", "kaiming")}
        rows.append("# " + " ".join(f"{k}={v}" for k, v in counts.items()))
        return "\n".join(rows)


def conv_targets(net: Module):
    """``(name, module)`` for every conv/linear weight, in depth order."""
    owners = {}
    for m in net.modules():
        if hasattr(m, "weight") and m.weight.data.ndim >= 2:
            owners[id(m.weight)] = m
    for name, p in net.named_parameters():
        if id(p) in owners and not p.frozen:
            yield name, owners[id(p)]


def _planar_shape(module) -> tuple[int, ...] | None:
    """Shape a 2D store entry must have to initialize ``module``, or None."""
    w = module.weight.data
    if isinstance(module, ACSConv):
        return w.shape
    if isinstance(module, Conv3d) and w.shape[2:] == (1, 1, 1):
        return w.shape[:2] + (1, 1)
    return None


def _is_encoder(name: str) -> bool:
    return name.startswith("encoder.") or name.startswith("segmenter.encoder.")


def _assign(module, values: np.ndarray) -> None:
    w = module.weight
    w.data = values.reshape(w.data.shape).astype(w.data.dtype)


def _fallback(module, rng, slope):
    if rng is not None:
        _assign(module, kaiming_init(module.weight.data.shape, rng, slope))


def transfer_matching(net: Module, store: WeightStore, seed=None,
                      slope: float = 0.01) -> MatchReport:
    """Copy store entries whose shape matches a target layer exactly.

    Targets are walked in depth order (encoder, then decoder); each takes the
    earliest unconsumed entry of identical shape. Unmatched layers keep their
    Kaiming initialization, or get fresh draws when ``seed`` is given.
    """
    rng = None if seed is None else np.random.Generator(np.random.Philox(seed))
    used = [False] * len(store)
    records = []
    for name, module in conv_targets(net):
        want = _planar_shape(module)
        match = None
        if want is not None:
            for i, e in enumerate(store.entries):
                if not used[i] and e.flag != "buffer" and e.shape == want:
                    match = i
                    break
        if match is None:
            _fallback(module, rng, slope)
            records.append(MatchRecord(name, "kaiming", target_shape=module.weight.shape))
            continue
        used[match] = True
        e = store.entries[match]
        _assign(module, store.array(e.name))
        records.append(MatchRecord(name, "exact", e.name,
                                   tuple((0, n) for n in want[:2]), module.weight.shape, e.shape))
    return MatchReport(records)


def transfer_all(net: Module, store: WeightStore, seed=None,
                 slope: float = 0.01) -> MatchReport:
    """Initialize encoder layers from leading slices of larger store entries.

    Each encoder target takes the earliest unconsumed entry with equal kernel
    extent and at least as many output and input channels, and receives
    ``source[:C_out, :C_in]``. Decoder layers are reported as Kaiming.
    """
    rng = None if seed is None else np.random.Generator(np.random.Philox(seed))
    used = [False] * len(store)
    records = []
    for name, module in conv_targets(net):
        want = _planar_shape(module)
        match = None
        if want is not None and _is_encoder(name):
            for i, e in enumerate(store.entries):
                if (not used[i] and e.flag != "buffer" and len(e.shape) == 4
                        and e.shape[2:] == want[2:]
                        and e.shape[0] >= want[0] and e.shape[1] >= want[1]):
                    match = i
                    break
        if match is None:
            _fallback(module, rng, slope)
            records.append(MatchRecord(name, "kaiming", target_shape=module.weight.shape))
            continue
        used[match] = True
        e = store.entries[match]
        _assign(module, store.array(e.name)[:want[0], :want[1]])
        records.append(MatchRecord(name, "slice", e.name, ((0, want[0]), (0, want[1])),
                                   module.weight.shape, e.shape))
    return MatchReport(records)


# ------------------------------------------------------------- checkpoints

def checkpoint_store(net: Module) -> WeightStore:
    items = [(name, p.data, "frozen" if p.frozen else "param")
             for name, p in net.named_parameters()]
    items += [(name, buf, "buffer") for name, buf in net.named_buffers()]
    return WeightStore.from_arrays(items, origin="checkpoint")


def save_checkpoint(net: Module, path) -> None:
    checkpoint_store(net).save(path)


def load_checkpoint(net: Module, path_or_store) -> None:
    """Load parameters, frozen flags and running statistics into ``net`` in place."""
    store = (path_or_store if isinstance(path_or_store, WeightStore)
             else load_store(path_or_store))
    targets = [(n, p.data.shape) for n, p in net.named_parameters()]
    targets += [(n, b.shape) for n, b in net.named_buffers()]
    for i, (name, shape) in enumerate(targets):
        if i >= len(store):
            raise StoreError(f"checkpoint is missing entry {name!r}")
        e = store.entries[i]
        if e.name != name or e.shape != tuple(shape):
            raise StoreError(
                f"checkpoint entry {i} mismatch: expected {name!r} {tuple(shape)}, "
                f"found {e.name!r} {e.shape}")
    if len(store) != len(targets):
        raise StoreError(f"checkpoint has {len(store) - len(targets)} unexpected extra entries")
    for name, p in net.named_parameters():
        p.data = store.array(name).astype(p.data.dtype)
        p.frozen = store.entry(name).flag == "frozen"
    owners = {}
    for m in net.modules():
        for b in m._buffers:
            owners[id(getattr(m, b))] = (m, b)
    for name, buf in list(net.named_buffers()):
        m, attr = owners[id(buf)]
        setattr(m, attr, store.array(name).astype(buf.dtype))
