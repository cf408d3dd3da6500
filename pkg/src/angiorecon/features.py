"""Surface refinement network: conv feature pyramid, vertex features and residual GCN.

Everything here is written against :mod:`angiorecon.autodiff` so the same code
serves inference (on a throwaway tape) and training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import autodiff as ad
from .errors import InvalidInputError, NumericalError
from .geometry import ProjectionOperator
from .mesh import MeshNormalization, TubeMesh

N_LEVELS = 4
DEFAULT_CHANNELS = (60, 60, 60, 60)
HIDDEN = 128
N_GCN_LAYERS = 8
FEATURE_RES = 64
# Offsets are head outputs times this factor. The normalized frame puts a
# 2 mm vessel at radius ~0.05, while one Adam step at lr 1e-3 moves a
# 128-wide head by ~0.1; the factor keeps early steps below the radius.
OFFSET_SCALE = 0.01


# ---------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ConvWeights:
    """Two 3x3 convolutions per pyramid level: ``kernels[2k]`` and ``kernels[2k+1]``."""

    kernels: list
    biases: list

    @property
    def channels(self) -> tuple:
        return tuple(self.kernels[2 * k + 1].shape[0] for k in range(N_LEVELS))

    @classmethod
    def init(cls, rng, channels=DEFAULT_CHANNELS, in_channels: int = 1) -> "ConvWeights":
        if len(channels) != N_LEVELS:
            raise InvalidInputError(f"need {N_LEVELS} channel counts, got {len(channels)}")
        kernels, biases = [], []
        c_in = in_channels
        for c in channels:
            for _ in range(2):
                kernels.append(glorot(rng, (c, c_in, 3, 3), 9 * c_in, 9 * c))
                biases.append(np.zeros(c))
                c_in = c
        return cls(kernels, biases)

    def arrays(self) -> list:
        return [a for pair in zip(self.kernels, self.biases) for a in pair]

    def replace(self, arrays) -> "ConvWeights":
        return ConvWeights(list(arrays[0::2]), list(arrays[1::2]))


@dataclass
class GcnWeights:
    """Input layer 483->128, eight 128x128 residual layers, linear head 128->3 (no biases)."""

    w_in: np.ndarray
    hidden: list
    w_out: np.ndarray

    @classmethod
    def init(cls, rng, in_dim: int = 483, hidden: int = HIDDEN, n_layers: int = N_GCN_LAYERS) -> "GcnWeights":
        w_in = glorot(rng, (in_dim, hidden), in_dim, hidden)
        layers = [glorot(rng, (hidden, hidden), hidden, hidden) for _ in range(n_layers)]
        # zero head: the untrained network returns the input mesh unchanged
        return cls(w_in, layers, np.zeros((hidden, 3)))

    @classmethod
    def zeros(cls, in_dim: int = 483, hidden: int = HIDDEN, n_layers: int = N_GCN_LAYERS) -> "GcnWeights":
        return cls(np.zeros((in_dim, hidden)), [np.zeros((hidden, hidden)) for _ in range(n_layers)],
                   np.zeros((hidden, 3)))

    def arrays(self) -> list:
        return [self.w_in, *self.hidden, self.w_out]

    def replace(self, arrays) -> "GcnWeights":
        return GcnWeights(arrays[0], list(arrays[1:-1]), arrays[-1])

    def names(self) -> list:
        return ["gcn.w_in"] + [f"gcn.w{l}" for l in range(len(self.hidden))] + ["gcn.w_out"]


# ---------------------------------------------------------------------------
# feature pyramid


@dataclass
class FeaturePyramid:
    levels: list  # N_LEVELS maps, each (C_k, H / 2^k, W / 2^k); Var or ndarray

    def values(self):
        return [l.value if isinstance(l, ad.Var) else l for l in self.levels]


def extract_features(image, weights, tape: Optional[ad.Tape] = None) -> FeaturePyramid:
    """Run the 4-level conv stack on a single-channel image.

    Level k applies two 3x3 conv + ReLU blocks; levels 1-3 first halve the
    resolution by 2x2 average pooling.

    ``weights`` is a :class:`ConvWeights` (a fresh tape is used) or a list of
    kernel/bias ``Var`` pairs already recorded on ``tape``.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 16:
        raise InvalidInputError(f"image must be 2D and at least 16x16, got {img.shape}")
    if img.shape[0] % 8 or img.shape[1] % 8:
        raise InvalidInputError(f"image size {img.shape} must be divisible by 8")
    if isinstance(weights, ConvWeights):
        tape = tape or ad.Tape()
        wv = [tape.const(a) for a in weights.arrays()]
    else:
        wv = list(weights)
        tape = wv[0].tape
    x = tape.const(img[None])
    levels = []
    for k in range(N_LEVELS):
        if k > 0:
            x = ad.avg_pool2(x)
        for j in range(2):
            idx = 2 * (2 * k + j)
            x = ad.relu(ad.conv2d(x, wv[idx], wv[idx + 1]))
        levels.append(x)
    return FeaturePyramid(levels)


# ---------------------------------------------------------------------------
# windows and vertex feature assembly


@dataclass(frozen=True)
class Window:
    """Square crop of a view: ``size`` image pixels starting at corner ``origin``.

    ``origin`` is the continuous image coordinate of the crop's top-left
    corner (pixel ``i`` spans ``[i - 0.5, i + 0.5]``). Normalized window units
    map the crop onto ``[0, 1]``.
    """

    origin: tuple
    size: float

    def to_unit(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv - np.asarray(self.origin)) / self.size

    def to_pixels(self, unit, res: int) -> np.ndarray:
        """Normalized units to pixel-center coordinates of a ``res`` x ``res`` raster."""
        return np.asarray(unit) * res - 0.5

    def crop(self, image, res: int) -> np.ndarray:
        """Box-filtered resample of ``image`` onto the window at ``res`` x ``res``."""
        img = np.asarray(image, dtype=float)
        step = self.size / res
        sub = max(int(np.ceil(step)), 1)
        offs = (np.arange(sub) + 0.5) / sub * step
        centers = np.arange(res) * step
        out = np.zeros((res, res))
        for oy in offs:
            ys = self.origin[1] + centers + oy
            for ox in offs:
                xs = self.origin[0] + centers + ox
                yy, xx = np.meshgrid(ys, xs, indexing="ij")
                out += ndimage.map_coordinates(img, [yy, xx], order=1, mode="constant", cval=0.0)
        return out / (sub * sub)


def window_for(uv, image_size, margin: float = 0.15, min_size: float = 32.0) -> Window:
    """Smallest square around projected points, padded by ``margin`` of its side."""
    uv = np.asarray(uv, dtype=float)
    lo = uv.min(axis=0) - 0.5
    hi = uv.max(axis=0) + 0.5
    side = max(float((hi - lo).max()) * (1.0 + 2.0 * margin), min_size)
    center = 0.5 * (lo + hi)
    return Window((float(center[0] - side / 2), float(center[1] - side / 2)), side)


def homogeneous_image_map(op: ProjectionOperator, norm: MeshNormalization) -> np.ndarray:
    """3x4 matrix taking normalized mesh coordinates to homogeneous pixels."""
    return op.matrix @ norm.affine()


def project_unit(xn, hmap: np.ndarray, window: Window):
    """Project normalized vertices into normalized window units (ndarray or Var)."""
    if isinstance(xn, ad.Var):
        p = ad.matmul(xn, hmap[:, :3].T) + hmap[:, 3]
        w = p[(slice(None), slice(2, 3))]
        uv = p[(slice(None), slice(0, 2))] / w
        return (uv - np.asarray(window.origin)) / window.size
    p = np.asarray(xn) @ hmap[:, :3].T + hmap[:, 3]
    w = p[:, 2:3]
    if np.any(np.abs(w) < 1e-12 * np.abs(p).max()):
        bad = int(np.argmin(np.abs(w[:, 0])))
        raise NumericalError(f"vertex {bad} projects onto the source plane")
    return (p[:, :2] / w - np.asarray(window.origin)) / window.size


def level_coords(unit, res: int, level: int):
    """Texel-center coordinates on pyramid level ``level`` of a ``res`` raster."""
    scale = 2.0 ** level
    return (np.asarray(unit) * res) / scale - 0.5


def sampling_matrices(unit, res: int, shapes) -> list:
    """Constant bilinear interpolation matrices, one per pyramid level."""
    mats = []
    for k, (h, w) in enumerate(shapes):
        uv = level_coords(unit, res, k)
        mat, _ = ad.bilinear_weights(h, w, uv[:, 0], uv[:, 1])
        mats.append(mat)
    return mats


def sample_pyramid(pyr: FeaturePyramid, mats) -> list:
    out = []
    for lvl, mat in zip(pyr.levels, mats):
        if isinstance(lvl, ad.Var):
            c, h, w = lvl.shape
            flat = ad.transpose(ad.reshape(lvl, (c, h * w)))
            out.append(ad.spmm(mat, flat))
        else:
            c, h, w = lvl.shape
            out.append(mat @ lvl.reshape(c, h * w).T)
    return out


def assemble_vertex_features(mesh: TubeMesh, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid,
                             op_a: ProjectionOperator, op_b: ProjectionOperator,
                             denorm: MeshNormalization, win_a: Window = None, win_b: Window = None):
    """Per-vertex features: sampled levels of view A, then view B, then (x, y, z).

    ``mesh`` is in the normalized frame. Without windows the pyramids are
    taken to cover the whole image (window = full detector).
    """
    cols = []
    for pyr, op, win in ((pyr_a, op_a, win_a), (pyr_b, op_b, win_b)):
        vals = pyr.values()
        res = vals[0].shape[1]
        if win is None:
            win = Window((-0.5, -0.5), float(res))
        unit = project_unit(mesh.vertices, homogeneous_image_map(op, denorm), win)
        mats = sampling_matrices(unit, res, [v.shape[1:] for v in vals])
        cols.extend(sample_pyramid(pyr, mats))
    if any(isinstance(c, ad.Var) for c in cols):
        return ad.concat(cols + [mesh.vertices], axis=1)
    out = np.concatenate(cols + [mesh.vertices], axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite vertex features")
    return out


# ---------------------------------------------------------------------------
# graph convolution


def normalized_adjacency(obj) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` for a :class:`TubeMesh` or ``(n_vertices, edges)`` pair."""
    if isinstance(obj, TubeMesh):
        n, edges = len(obj.vertices), obj.edges
    else:
        n, edges = obj
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicate edges
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(deg))
    return (dinv @ a @ dinv).tocsr()


def gcn_layer(h, adj, w, activate: bool = True):
    """``sigma(adj @ h @ w)`` on arrays or tape vars; identity instead of ReLU when not ``activate``."""
    if h.shape[1] != w.shape[0]:
        raise InvalidInputError(f"feature width {h.shape[1]} does not match weight rows {w.shape[0]}")
    if isinstance(h, ad.Var) or isinstance(w, ad.Var):
        hv = h if isinstance(h, ad.Var) else w.tape.const(h)
        z = ad.spmm(adj, ad.matmul(hv, w))
        return ad.relu(z) if activate else z
    z = adj @ (np.asarray(h) @ np.asarray(w))
    return np.maximum(z, 0.0) if activate else z


def gcn_forward(feats, adj, params, absolute_regression: bool = False, base=None):
    """Input layer, residual GCN layers and a linear head.

    ``params`` is a :class:`GcnWeights` or the matching list of tape vars.
    Returns ``base + OFFSET_SCALE * head`` (the raw head output when
    ``absolute_regression`` or when ``base`` is None).
    """
    arrs = params.arrays() if isinstance(params, GcnWeights) else list(params)
    h = gcn_layer(feats, adj, arrs[0], True)
    _finite(h, "input layer")
    for l, w in enumerate(arrs[1:-1]):
        h = gcn_layer(h, adj, w, True) + h
        _finite(h, f"gcn layer {l}")
    out = gcn_layer(h, adj, arrs[-1], False)
    _finite(out, "output head")
    if base is None or absolute_regression:
        return out
    return out * OFFSET_SCALE + base


def _finite(x, where):
    v = x.value if isinstance(x, ad.Var) else x
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite values after {where}")


def refine_mesh(mesh: TubeMesh, feats, w: GcnWeights, adj=None, absolute_regression: bool = False) -> TubeMesh:
    """Apply the trained GCN to a normalized mesh; the topology is carried over unchanged."""
    feats = np.asarray(feats)
    if feats.shape[0] != len(mesh.vertices):
        raise InvalidInputError(f"{feats.shape[0]} feature rows for {len(mesh.vertices)} vertices")
    adj = normalized_adjacency(mesh) if adj is None else adj
    out = gcn_forward(feats, adj, w, absolute_regression, base=mesh.vertices)
    return mesh.with_vertices(out)


# ---------------------------------------------------------------------------
# checkpoints: 8-byte little-endian header length, JSON header, float64 blob


def save_checkpoint(path, conv: ConvWeights, gcn: GcnWeights, meta: dict = None) -> None:
    arrays = conv.arrays() + gcn.arrays()
    header = {
        "format": "angiorecon-weights-1",
        "conv_channels": list(conv.channels),
        "conv_shapes": [list(a.shape) for a in conv.arrays()],
        "gcn_shapes": [list(a.shape) for a in gcn.arrays()],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(ConvWeights, GcnWeights, meta)``; shapes are validated against the header."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise InvalidInputError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: unreadable checkpoint header") from exc
    shapes = [tuple(s) for s in header["conv_shapes"]] + [tuple(s) for s in header["gcn_shapes"]]
    blob = np.frombuffer(raw[8 + hlen:], dtype="<f8")
    need = sum(int(np.prod(s)) for s in shapes)
    if blob.size != need:
        raise InvalidInputError(f"{path}: blob holds {blob.size} values, header expects {need}")
    arrays, pos = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(blob[pos:pos + k].reshape(s).astype(float))
        pos += k
    nc = len(header["conv_shapes"])
    conv = ConvWeights(arrays[0:nc:2], arrays[1:nc:2])
    g = arrays[nc:]
    gcn = GcnWeights(g[0], g[1:-1], g[-1])
    return conv, gcn, header.get("meta", {})
