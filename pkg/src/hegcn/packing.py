"""Tensor-to-slot packings: adjacency-matrix-aware (AMA) and row-major.

A graph tensor is indexed (b, c, t, j): batch, channel, frame, joint.

AMA packing builds, per joint, a stack of per-channel blocks.  A channel
block is the (B, T) slice flattened batch-major and zero-padded to the
next power of two ``pad_bt``.  Up to ``U = min(slot_count // pad_bt, C)``
blocks fill one ciphertext; a joint with more channels spans
``ceil(C / U)`` ciphertexts.  When a ciphertext's content vector is shorter
than the slot vector it is tiled (stacked copies) until full, so rotations
by block strides act on a periodic vector.

Row-major packing is the baseline: one ciphertext per (batch, channel)
holding the T x J feature map flattened row by row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from hegcn.hesim import SimCiphertext, SimContext

AMA = "ama"
ROWMAJOR = "rowmajor"


class PackingError(Exception):
    """Tensor does not fit the requested layout, or layout mismatch."""


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 2 ** math.ceil(math.log2(n))


@dataclass
class GraphTensor:
    """Dense (B, C, T, J) tensor of finite float64 values."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"expected 4 dims (B,C,T,J), got {self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValueError("all dims must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @classmethod
    def random(cls, dims, seed=0, scale=1.0) -> "GraphTensor":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, size=tuple(dims)))

    @classmethod
    def zeros(cls, dims) -> "GraphTensor":
        return cls(np.zeros(tuple(dims)))

    # file format: one JSON header line, then little-endian float64 in
    # row-major (b, c, t, j) order
    def save(self, path) -> None:
        header = {"dims": list(self.dims), "dtype": "f64", "order": "bctj"}
        with open(path, "wb") as fp:
            fp.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            fp.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GraphTensor":
        with open(path, "rb") as fp:
            header_line = fp.readline()
            header = json.loads(header_line.decode("utf-8"))
            if header.get("dtype") != "f64" or header.get("order") != "bctj":
                raise PackingError(f"unsupported tensor header: {header}")
            dims = tuple(int(d) for d in header["dims"])
            raw = fp.read()
        expected = int(np.prod(dims)) * 8
        if len(raw) != expected:
            raise PackingError(f"tensor payload is {len(raw)} bytes, expected {expected}")
        data = np.frombuffer(raw, dtype="<f8").reshape(dims)
        return cls(data.astype(np.float64))


@dataclass
class PackingLayout:
    """Bijection between occupied slots and (b, c, t, j) coordinates.

    ``pad_bt`` is the padded channel-block length (AMA) or the padded row
    length T*J (row-major).  ``capacity`` is the number of block positions
    per ciphertext (AMA only); ``channels_per_ct`` is capacity capped at C.
    """

    kind: str
    slot_count: int
    B: int
    C: int
    T: int
    J: int
    pad_bt: int
    channels_per_ct: int
    cts_per_joint: int
    replication: int

    @property
    def capacity(self) -> int:
        """Block positions per AMA ciphertext (slot_count // pad_bt)."""
        return self.slot_count // self.pad_bt if self.kind == AMA else 1

    def ct_count(self) -> int:
        if self.kind == AMA:
            return self.J * self.cts_per_joint
        return self.B * self.C

    @property
    def wasted_slots(self) -> int:
        """Zero-filled tail of a row-major ciphertext."""
        if self.kind != ROWMAJOR:
            return 0
        return self.slot_count - self.T * self.J

    # ---- AMA geometry -------------------------------------------------

    def group_channels(self, g: int) -> range:
        lo = g * self.channels_per_ct
        return range(lo, min(lo + self.channels_per_ct, self.C))

    def group_size(self, g: int) -> int:
        return len(self.group_channels(g))

    def block_channel(self, g: int, beta: int) -> int:
        """Channel held at block position ``beta`` of group-``g`` ciphertexts.

        Blocks tile cyclically with the group's own size, so replica blocks
        map back onto real channels.
        """
        n = self.group_size(g)
        return g * self.channels_per_ct + (beta % n)

    def ama_ct_index(self, j: int, g: int) -> int:
        return j * self.cts_per_joint + g

    # ---- slot maps -----------------------------------------------------

    def slot_of(self, b: int, c: int, t: int, j: int) -> tuple[int, int]:
        """(ciphertext index, slot) of a tensor coordinate's first copy."""
        if self.kind == AMA:
            g, p = divmod(c, self.channels_per_ct)
            return self.ama_ct_index(j, g), p * self.pad_bt + b * self.T + t
        return b * self.C + c, t * self.J + j

    def coord_of(self, ct_index: int, slot: int):
        """Inverse slot map; returns None for padding or replica slots."""
        if self.kind == AMA:
            j, g = divmod(ct_index, self.cts_per_joint)
            n = self.group_size(g)
            beta, off = divmod(slot, self.pad_bt)
            if beta >= n:  # replica copy or dead space
                return None
            b, t = divmod(off, self.T)
            if b >= self.B or t >= self.T or off >= self.B * self.T:
                return None
            return (b, g * self.channels_per_ct + beta, t, j)
        b, c = divmod(ct_index, self.C)
        t, j = divmod(slot, self.J)
        if t >= self.T:
            return None
        return (b, c, t, j)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PackingLayout":
        return cls(**json.loads(text))


def ama_layout(dims, slot_count: int) -> PackingLayout:
    B, C, T, J = dims
    pad_bt = next_pow2(B * T)
    if pad_bt > slot_count:
        raise PackingError(
            f"channel block of {B}x{T} pads to {pad_bt} slots, exceeding slot count {slot_count}"
        )
    U = min(slot_count // pad_bt, C)
    cts_per_joint = math.ceil(C / U)
    replication = slot_count // (U * pad_bt) if C <= U else 1
    return PackingLayout(AMA, slot_count, B, C, T, J, pad_bt, U, cts_per_joint, replication)


def rowmajor_layout(dims, slot_count: int) -> PackingLayout:
    B, C, T, J = dims
    if T * J > slot_count:
        raise PackingError(f"T*J = {T * J} exceeds slot count {slot_count}")
    return PackingLayout(ROWMAJOR, slot_count, B, C, T, J, next_pow2(T * J), 1, 0, 1)


def giant_step_coverage(cap: int, n: int) -> dict[int, np.ndarray]:
    """Which block rotation serves which block position during channel folds.

    Block position p of a ciphertext rotated by ``delta`` blocks exposes the
    channel stored at block (p + delta) mod cap, and blocks tile with period
    ``n`` (the group's channel count).  Every position must receive each of
    the n channels through exactly one rotation.  When n divides cap the
    rotations 0..n-1 cover uniformly; ragged tilings need a few extra, which
    the greedy scan picks deterministically.

    Returns {delta: bool mask over positions where delta is the provider}.
    """
    sel: dict[int, np.ndarray] = {}
    for p in range(cap):
        seen: set[int] = set()
        delta = 0
        while len(seen) < n:
            q = ((p + delta) % cap) % n
            if q not in seen:
                seen.add(q)
                sel.setdefault(delta, np.zeros(cap, dtype=bool))[p] = True
            delta += 1
    return sel


def _tile(vec: np.ndarray, slot_count: int) -> np.ndarray:
    reps = math.ceil(slot_count / vec.size)
    return np.tile(vec, reps)[:slot_count]


def ama_pack(x: GraphTensor, ctx: SimContext) -> tuple[list[SimCiphertext], PackingLayout]:
    """Pack per joint: flatten, pad, concatenate channel blocks, stack copies."""
    layout = ama_layout(x.dims, ctx.slot_count)
    B, C, T, J = x.dims
    pad = layout.pad_bt
    blocks = np.zeros((C, J, pad))
    # batch-major flattening: b outer, t inner
    blocks[:, :, : B * T] = x.data.transpose(1, 3, 0, 2).reshape(C, J, B * T)
    cts = []
    for j in range(J):
        for g in range(layout.cts_per_joint):
            chans = layout.group_channels(g)
            group_vec = blocks[chans.start : chans.stop, j, :].ravel()
            cts.append(ctx.encrypt(_tile(group_vec, ctx.slot_count)))
    return cts, layout


def ama_unpack(
    cts: list[SimCiphertext],
    layout: PackingLayout,
    check_replicas: bool = True,
    tol: float = 1e-9,
) -> GraphTensor:
    """Exact inverse of ama_pack on occupied slots.

    Reads the first copy of every channel block.  With ``check_replicas``
    the stacked copies must agree within ``tol``.
    """
    _check_layout(cts, layout, AMA)
    B, C, T, J = layout.B, layout.C, layout.T, layout.J
    pad = layout.pad_bt
    out = np.empty((B, C, T, J))
    for j in range(J):
        for g in range(layout.cts_per_joint):
            ct = cts[layout.ama_ct_index(j, g)]
            chans = layout.group_channels(g)
            period = len(chans) * pad
            if check_replicas and period < layout.slot_count:
                tiled = _tile(ct.slots[:period], layout.slot_count)
                drift = np.max(np.abs(ct.slots - tiled))
                if drift > tol:
                    raise PackingError(
                        f"replica divergence in ct {ct.id}: max drift {drift:.3e} > {tol:.1e}"
                    )
            for p, c in enumerate(chans):
                block = ct.slots[p * pad : p * pad + B * T]
                out[:, c, :, j] = block.reshape(B, T)
    return GraphTensor(out)


def rowmajor_pack(x: GraphTensor, ctx: SimContext) -> tuple[list[SimCiphertext], PackingLayout]:
    """One ciphertext per (b, c): slots[t*J + j] = x[b, c, t, j]."""
    layout = rowmajor_layout(x.dims, ctx.slot_count)
    B, C, T, J = x.dims
    cts = []
    for b in range(B):
        for c in range(C):
            cts.append(ctx.encrypt(x.data[b, c].ravel()))
    return cts, layout


def rowmajor_unpack(cts: list[SimCiphertext], layout: PackingLayout) -> GraphTensor:
    _check_layout(cts, layout, ROWMAJOR)
    B, C, T, J = layout.B, layout.C, layout.T, layout.J
    out = np.empty((B, C, T, J))
    for b in range(B):
        for c in range(C):
            ct = cts[b * C + c]
            out[b, c] = ct.slots[: T * J].reshape(T, J)
    return GraphTensor(out)


def _check_layout(cts, layout: PackingLayout, kind: str) -> None:
    if layout.kind != kind:
        raise PackingError(f"layout kind {layout.kind!r} does not match {kind!r}")
    if len(cts) != layout.ct_count():
        raise PackingError(f"expected {layout.ct_count()} ciphertexts, got {len(cts)}")
    for ct in cts:
        if len(ct.slots) != layout.slot_count:
            raise PackingError("ciphertext slot count does not match layout")
