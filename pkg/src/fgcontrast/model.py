"""Desk-scale backbone, its EMA momentum twin, the Morton grid reshape, and
the Siamese correspondence network (projector + score gating).

The backbone is a per-point MLP over xyz followed by one k-NN mean
aggregation and a linear head, with row l2-normalization so dot products in
the losses are cosine similarities. The grid reshape orders points by the
Morton (z-order) code of their voxelized coordinates so grid neighbors are
spatial neighbors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from fgcontrast.autodiff import (
    Tensor,
    add,
    gather,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    tmean,
)
from fgcontrast.errors import ArgumentError, DataError, FormatError, ShapeError
from fgcontrast.rng import rng_for
from fgcontrast.scene import PointCloud

CKPT_MAGIC = b"FACCK1"


@dataclass(frozen=True)
class ModelConfig:
    f_c: int = 20
    m: int = 20
    backbone_hidden: tuple = (32, 32)
    knn_k: int = 8
    ema_momentum: float = 0.999
    morton_voxel_size: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.f_c < 1 or self.m < 1 or self.knn_k < 1:
            raise ArgumentError("f_c, m, knn_k must be >= 1")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ArgumentError("ema_momentum must be in [0, 1]")


@dataclass
class BackboneParams:
    """Per-point MLP layers plus the post-aggregation linear head."""

    layers: list
    head_w: Tensor
    head_b: Tensor

    def named(self, prefix: str = "backbone") -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.layer{i}.w"] = w
            out[f"{prefix}.layer{i}.b"] = b
        out[f"{prefix}.head.w"] = self.head_w
        out[f"{prefix}.head.b"] = self.head_b
        return out

    def tensors(self) -> list:
        flat = [t for pair in self.layers for t in pair]
        return flat + [self.head_w, self.head_b]


@dataclass
class ProjectorParams:
    """Two point-MLPs with a ReLU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str = "projector") -> dict:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    def tensors(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


def init_backbone(cfg: ModelConfig, requires_grad: bool = True, tag: int = 1) -> BackboneParams:
    rng = rng_for(cfg.seed, 0xB0, tag)
    layers = []
    fan_in = 3
    for width in cfg.backbone_hidden:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        layers.append((Tensor(w, requires_grad), Tensor(np.zeros(width), requires_grad)))
        fan_in = width
    head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, cfg.f_c)), requires_grad)
    head_b = Tensor(np.zeros(cfg.f_c), requires_grad)
    return BackboneParams(layers=layers, head_w=head_w, head_b=head_b)


def init_projector(cfg: ModelConfig, requires_grad: bool = True) -> ProjectorParams:
    rng = rng_for(cfg.seed, 0xB0, 2)
    return ProjectorParams(
        w1=Tensor(rng.normal(0.0, np.sqrt(2.0 / cfg.f_c), size=(cfg.f_c, cfg.f_c)), requires_grad),
        b1=Tensor(np.zeros(cfg.f_c), requires_grad),
        w2=Tensor(rng.normal(0.0, np.sqrt(1.0 / cfg.f_c), size=(cfg.f_c, cfg.f_c)), requires_grad),
        b2=Tensor(np.zeros(cfg.f_c), requires_grad),
    )


def clone_params(params: BackboneParams) -> BackboneParams:
    """Detached copy (no gradients), used for the EMA target."""
    return BackboneParams(
        layers=[(Tensor(w.data.copy()), Tensor(b.data.copy())) for w, b in params.layers],
        head_w=Tensor(params.head_w.data.copy()),
        head_b=Tensor(params.head_b.data.copy()),
    )


@dataclass(frozen=True)
class FeatureMap:
    """Features in point layout (N x f_c) or grid layout (m x N/m x f_c).

    Grid layout stores values row-major over the m x (N/m) grid with the
    Morton permutation recorded; perm[i] is the point row feeding grid slot i.
    """

    values: Tensor
    layout: str
    m: int = 0
    perm: np.ndarray | None = None

    def __post_init__(self):
        if self.layout not in ("point", "grid"):
            raise ArgumentError(f"unknown layout {self.layout!r}")
        if self.layout == "grid":
            n = self.values.shape[0]
            if self.m < 1 or n % self.m != 0:
                raise ShapeError(f"grid layout needs N divisible by m, got N={n}, m={self.m}")
            if self.perm is None or len(self.perm) != n:
                raise ShapeError("grid layout needs its permutation")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def morton_codes(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Interleaved-bit z-order codes of voxel coordinates, 21 bits per axis,
    relative to the cloud's min corner."""
    pos = np.asarray(positions, dtype=np.float64)
    vox = np.floor((pos - pos.min(axis=0)) / voxel_size).astype(np.int64)
    vox = np.clip(vox, 0, (1 << 21) - 1).astype(np.uint64)
    codes = np.zeros(len(vox), dtype=np.uint64)
    for bit in range(21):
        for axis in range(3):
            codes |= ((vox[:, axis] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(
                3 * bit + axis
            )
    return codes


def morton_order(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Point order sorted by Morton code, ties by original index."""
    return np.argsort(morton_codes(positions, voxel_size), kind="stable")


def reshape_grid(f: FeatureMap, positions: np.ndarray, m: int, voxel_size: float = 0.05) -> FeatureMap:
    """Fold point-layout features into the m x N/m grid in Morton order."""
    if f.layout != "point":
        raise ArgumentError("reshape_grid expects point layout")
    n = f.n
    if m < 1 or n % m != 0:
        raise ShapeError(f"N={n} not divisible by m={m}")
    perm = morton_order(positions, voxel_size)
    return FeatureMap(values=gather(f.values, perm), layout="grid", m=m, perm=perm)


def unfold_grid(f: FeatureMap) -> FeatureMap:
    """Exact inverse of reshape_grid; restores point order bitwise."""
    if f.layout != "grid":
        raise ArgumentError("unfold_grid expects grid layout")
    inv = np.argsort(f.perm, kind="stable")
    return FeatureMap(values=gather(f.values, inv), layout="point")


def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """Indices of each point's k nearest neighbors (self included)."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < k:
        raise ArgumentError(f"need at least {k} points for k-NN aggregation")
    tree = cKDTree(pos)
    _, idx = tree.query(pos, k=k)
    if k == 1:
        idx = idx[:, None]
    return idx.astype(np.int64)


def backbone_forward(params: BackboneParams, view: PointCloud, cfg: ModelConfig) -> FeatureMap:
    """Point features D: MLP(xyz) -> k-NN mean aggregation -> linear -> l2 rows."""
    n = view.n
    if n % cfg.m != 0:
        raise ShapeError(f"view size {n} not divisible by grid width {cfg.m}")
    h = Tensor(view.positions)
    for w, b in params.layers:
        h = relu(add(matmul(h, w), b))
    idx = knn_indices(view.positions, cfg.knn_k)
    width = h.shape[1]
    agg = tmean(reshape(gather(h, idx.reshape(-1)), (n, cfg.knn_k, width)), axis=1)
    out = add(matmul(agg, params.head_w), params.head_b)
    return FeatureMap(values=l2_normalize(out), layout="point")


def scn_forward(
    proj: ProjectorParams, e_a: FeatureMap, e_b: FeatureMap
) -> tuple[FeatureMap, FeatureMap]:
    """Score-gated features: S = sigmoid(h(E)), H = E * S, F = unfold(H)."""
    outs = []
    for e in (e_a, e_b):
        if e.layout != "grid":
            raise ShapeError("scn_forward expects grid-layout feature maps")
        z = add(matmul(relu(add(matmul(e.values, proj.w1), proj.b1)), proj.w2), proj.b2)
        gated = mul(e.values, sigmoid(z))
        outs.append(unfold_grid(FeatureMap(values=gated, layout="grid", m=e.m, perm=e.perm)))
    return outs[0], outs[1]


def ema_update(target: BackboneParams, online: BackboneParams, momentum: float) -> None:
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_o, in place.

    The target receives no gradients; only raw parameter arrays change.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ArgumentError("momentum must be in [0, 1]")
    t_list, o_list = target.tensors(), online.tensors()
    if len(t_list) != len(o_list):
        raise ShapeError("parameter structure mismatch")
    for t, o in zip(t_list, o_list):
        if t.shape != o.shape:
            raise ShapeError(f"parameter shape mismatch {t.shape} vs {o.shape}")
        t.data = momentum * t.data + (1.0 - momentum) * o.data


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, named_arrays: dict, config_echo: str = "") -> None:
    """Little-endian: magic, u32 entry count, entries of (u32 name len, name,
    u32 ndim, ndim x u64 dims, f64 payload), then u32-length config echo."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", 0, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8").tobytes())
        eb = config_echo.encode("utf-8")
        f.write(struct.pack("<I", len(eb)))
        f.write(eb)


def load_checkpoint(path) -> tuple[dict, str]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:6] != CKPT_MAGIC:
        raise FormatError("bad checkpoint header")
    reserved, count = struct.unpack("<HI", blob[6:12])
    if reserved != 0:
        raise FormatError("bad checkpoint header (reserved)")
    off = 12
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
        (elen,) = struct.unpack_from("<I", blob, off)
        off += 4
        echo = blob[off : off + elen].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"truncated or corrupt checkpoint: {e}") from e
    return arrays, echo


def params_to_arrays(backbone: BackboneParams, projector: ProjectorParams, target: BackboneParams) -> dict:
    arrays = {}
    for name, t in backbone.named("backbone").items():
        arrays[name] = t.data
    for name, t in projector.named("projector").items():
        arrays[name] = t.data
    for name, t in target.named("target").items():
        arrays[name] = t.data
    return arrays


def params_from_arrays(arrays: dict, cfg: ModelConfig) -> tuple[BackboneParams, ProjectorParams, BackboneParams]:
    def build_backbone(prefix: str, requires_grad: bool) -> BackboneParams:
        layers = []
        i = 0
        while f"{prefix}.layer{i}.w" in arrays:
            layers.append(
                (
                    Tensor(arrays[f"{prefix}.layer{i}.w"].copy(), requires_grad),
                    Tensor(arrays[f"{prefix}.layer{i}.b"].copy(), requires_grad),
                )
            )
            i += 1
        if not layers or f"{prefix}.head.w" not in arrays:
            raise DataError(f"checkpoint missing {prefix} parameters")
        return BackboneParams(
            layers=layers,
            head_w=Tensor(arrays[f"{prefix}.head.w"].copy(), requires_grad),
            head_b=Tensor(arrays[f"{prefix}.head.b"].copy(), requires_grad),
        )

    backbone = build_backbone("backbone", True)
    target = build_backbone("target", False)
    try:
        projector = ProjectorParams(
            w1=Tensor(arrays["projector.w1"].copy(), True),
            b1=Tensor(arrays["projector.b1"].copy(), True),
            w2=Tensor(arrays["projector.w2"].copy(), True),
            b2=Tensor(arrays["projector.b2"].copy(), True),
        )
    except KeyError as e:
        raise DataError(f"checkpoint missing projector parameters: {e}") from e
    return backbone, projector, target
