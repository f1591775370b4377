"""Forward rules and vector-Jacobian products for every graph primitive.

Each primitive is registered as ``PRIMITIVES[kind]`` with

* ``forward(attrs, *values) -> (out, saved)``
* ``vjp(attrs, saved, g, values, needs) -> sequence of parent gradients``

``needs[i]`` is False when parent ``i`` does not lead to a differentiable
input, in which case the rule may return ``None`` for it.

Subgradient conventions: ``relu'(0) = 0``; ``clamp`` passes gradient only
strictly inside ``(lo, hi)``; ``l2norm`` has zero gradient at the origin;
samplers have zero coordinate gradient along any clamped axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(kind: str):
    def deco(cls):
        PRIMITIVES[kind] = Primitive(kind, cls.forward, cls.vjp)
        return cls
    return deco


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------- elementwise
@_register("add")
class _Add:
    @staticmethod
    def forward(attrs, a, b):
        return a + b, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        a, b = vals
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


@_register("sub")
class _Sub:
    @staticmethod
    def forward(attrs, a, b):
        return a - b, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        a, b = vals
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


@_register("mul")
class _Mul:
    @staticmethod
    def forward(attrs, a, b):
        return a * b, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        a, b = vals
        ga = unbroadcast(g * b, a.shape) if needs[0] else None
        gb = unbroadcast(g * a, b.shape) if needs[1] else None
        return ga, gb


@_register("div")
class _Div:
    @staticmethod
    def forward(attrs, a, b):
        if np.any(b == 0):
            raise ShapeError("division by zero")
        return a / b, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        a, b = vals
        ga = unbroadcast(g / b, a.shape) if needs[0] else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None
        return ga, gb


@_register("neg")
class _Neg:
    @staticmethod
    def forward(attrs, a):
        return -a, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (-g,)


@_register("relu")
class _Relu:
    @staticmethod
    def forward(attrs, x):
        return np.maximum(x, 0.0), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (g * (vals[0] > 0),)


@_register("softplus")
class _Softplus:
    @staticmethod
    def forward(attrs, x):
        beta = attrs["beta"]
        return np.logaddexp(0.0, beta * x) / beta, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (g * expit(attrs["beta"] * vals[0]),)


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(attrs, x):
        s = expit(attrs["beta"] * x)
        return s, s

    @staticmethod
    def vjp(attrs, s, g, vals, needs):
        return (g * attrs["beta"] * s * (1.0 - s),)


@_register("clamp")
class _Clamp:
    @staticmethod
    def forward(attrs, x):
        return np.clip(x, attrs["lo"], attrs["hi"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        x = vals[0]
        return (g * ((x > attrs["lo"]) & (x < attrs["hi"])),)


# ------------------------------------------------------------------- linear
@_register("linear")
class _Linear:
    @staticmethod
    def forward(attrs, x, w, b=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
        out = x @ w
        if b is not None:
            if b.shape != (w.shape[1],):
                raise ShapeError(f"linear: bias {b.shape} != ({w.shape[1]},)")
            out = out + b
        return out, None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        x, w = vals[0], vals[1]
        gx = g @ w.T if needs[0] else None
        gw = x.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if needs[1] else None
        out = [gx, gw]
        if len(vals) == 3:
            out.append(g.reshape(-1, w.shape[1]).sum(axis=0) if needs[2] else None)
        return out


def _parse_einsum(subscripts: str):
    lhs, out = subscripts.replace(" ", "").split("->")
    a, b = lhs.split(",")
    for part in (a, b):
        if len(set(part)) != len(part):
            raise ShapeError(f"einsum: repeated index in {part!r}")
    return a, b, out


@_register("einsum")
class _Einsum:
    @staticmethod
    def forward(attrs, a, b):
        sa, sb, so = _parse_einsum(attrs["subscripts"])
        if a.ndim != len(sa) or b.ndim != len(sb):
            raise ShapeError(f"einsum {attrs['subscripts']!r}: operand ranks {a.ndim}, {b.ndim}")
        return np.einsum(attrs["subscripts"], a, b, optimize=True), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        a, b = vals
        sa, sb, so = _parse_einsum(attrs["subscripts"])

        def grad_for(target, other, s_other, target_shape):
            present = "".join(c for c in target if c in so or c in s_other)
            r = np.einsum(f"{so},{s_other}->{present}", g, other, optimize=True)
            if present != target:
                r = _expand(r, present, target, dict(zip(target, target_shape)))
            return r

        ga = grad_for(sa, b, sb, a.shape) if needs[0] else None
        gb = grad_for(sb, a, sa, b.shape) if needs[1] else None
        return ga, gb


def _expand(r, present, target, sizes):
    # indices summed only inside one operand: gradient is constant along them
    order = [present.index(c) for c in target if c in present]
    r = np.transpose(r, order) if order else r
    shape = [sizes[c] if c in present else 1 for c in target]
    r = r.reshape(shape)
    return np.broadcast_to(r, tuple(sizes[c] for c in target)).copy()


# ----------------------------------------------------------- convolutions
@_register("conv2d")
class _Conv2d:
    """Stride-1 'same' convolution over a batch: x [N,C,H,W], w [O,C,k,k]."""

    @staticmethod
    def forward(attrs, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} != ({w.shape[0]},)")
        n, c, h, wd = x.shape
        o, k = w.shape[0], w.shape[2]
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n c h w k k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
        out = cols @ w.reshape(o, -1).T + b
        return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2), cols

    @staticmethod
    def vjp(attrs, cols, g, vals, needs):
        x, w, b = vals
        n, c, h, wd = x.shape
        o, k = w.shape[0], w.shape[2]
        p = k // 2
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if needs[1] else None
        gb = g2.sum(axis=0) if needs[2] else None
        gx = None
        if needs[0]:
            dcols = (g2 @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
            gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd]
        return gx, gw, gb


def _offsets(k: int):
    return list(itertools.product(range(k), repeat=3))


@_register("masked_conv3d")
class _MaskedConv3d:
    """3D 'same' convolution evaluated only on voxels of ``out_mask``.

    x [C,X,Y,Z], w [O,C,k,k,k]; output is exactly zero outside the mask.
    """

    @staticmethod
    def _index(attrs, x, k):
        mask = attrs["out_mask"]
        if mask.shape != x.shape[1:]:
            raise ShapeError(f"masked_conv3d: mask {mask.shape} != grid {x.shape[1:]}")
        p = k // 2
        dims = np.array(x.shape[1:]) + 2 * p
        ix, iy, iz = np.nonzero(mask)
        base = (ix * dims[1] + iy) * dims[2] + iz
        steps = [(a * dims[1] + bb) * dims[2] + c for a, bb, c in _offsets(k)]
        return base, steps, dims, (ix, iy, iz)

    @staticmethod
    def forward(attrs, x, w, b):
        if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0] or len(set(w.shape[2:])) != 1 or w.shape[2] % 2 == 0:
            raise ShapeError(f"masked_conv3d: input {x.shape} incompatible with weight {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"masked_conv3d: bias {b.shape} != ({w.shape[0]},)")
        k = w.shape[2]
        p = k // 2
        base, steps, dims, idx = _MaskedConv3d._index(attrs, x, k)
        # channels-last copy so each tap gathers contiguous rows
        xrows = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))).reshape(x.shape[0], -1).T.copy()
        taps = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, w.shape[1], w.shape[0]))
        acc = np.zeros((base.size, w.shape[0]))
        for tap, step in zip(taps, steps):
            acc += xrows[base + step] @ tap
        acc += b
        out = np.zeros((w.shape[0],) + x.shape[1:])
        out[(slice(None),) + idx] = acc.T
        return out, (base, steps, dims, idx, xrows)

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        x, w, b = vals
        base, steps, dims, idx, xrows = saved
        k = w.shape[2]
        p = k // 2
        gact = np.ascontiguousarray(g[(slice(None),) + idx].T)  # [n, O]
        taps = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1).reshape(-1, w.shape[0], w.shape[1]))
        gtaps = np.zeros((len(steps), w.shape[1], w.shape[0])) if needs[1] else None
        grows = np.zeros_like(xrows) if needs[0] else None
        for i, step in enumerate(steps):
            rows = base + step
            if needs[1]:
                gtaps[i] = xrows[rows].T @ gact
            if needs[0]:
                # indices are unique within one offset
                grows[rows] += gact @ taps[i]
        gw = gtaps.reshape(k, k, k, w.shape[1], w.shape[0]).transpose(4, 3, 0, 1, 2).copy() if needs[1] else None
        gb = gact.sum(axis=0) if needs[2] else None
        gx = None
        if needs[0]:
            gxp = grows.T.reshape((x.shape[0],) + tuple(dims))
            gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]]
        return gx, gw, gb


# ----------------------------------------------------------- shape ops
@_register("concat")
class _Concat:
    @staticmethod
    def forward(attrs, *xs):
        return np.concatenate(xs, axis=attrs["axis"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        axis = attrs["axis"]
        sizes = [v.shape[axis] for v in vals]
        cuts = np.cumsum(sizes)[:-1]
        return np.split(g, cuts, axis=axis)


@_register("stack")
class _Stack:
    @staticmethod
    def forward(attrs, *xs):
        return np.stack(xs, axis=attrs["axis"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        axis = attrs["axis"]
        return [np.take(g, i, axis=axis) for i in range(len(vals))]


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(attrs, x):
        return x.reshape(attrs["shape"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (g.reshape(vals[0].shape),)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(attrs, x):
        return np.transpose(x, attrs["axes"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (np.transpose(g, np.argsort(attrs["axes"])),)


@_register("take")
class _Take:
    @staticmethod
    def forward(attrs, x):
        return np.take(x, attrs["index"], axis=attrs["axis"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        x = vals[0]
        axis = attrs["axis"] % x.ndim
        index = attrs["index"]
        gx = np.zeros_like(x)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(gm, index, gg)
        return (gx,)


@_register("broadcast_to")
class _BroadcastTo:
    @staticmethod
    def forward(attrs, x):
        return np.broadcast_to(x, attrs["shape"]).copy(), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (unbroadcast(g, vals[0].shape),)


def _expand_reduced(g, x, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * x.ndim), x.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _count(x, axis):
    if axis is None:
        return x.size
    axes = (axis,) if np.isscalar(axis) else axis
    return int(np.prod([x.shape[a] for a in axes]))


@_register("sum")
class _Sum:
    @staticmethod
    def forward(attrs, x):
        return np.sum(x, axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        return (_expand_reduced(g, vals[0], attrs["axis"], attrs["keepdims"]).copy(),)


@_register("mean")
class _Mean:
    @staticmethod
    def forward(attrs, x):
        return np.mean(x, axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        x = vals[0]
        return (_expand_reduced(g, x, attrs["axis"], attrs["keepdims"]) / _count(x, attrs["axis"]),)


@_register("var")
class _Var:
    """Biased (divide-by-n) variance."""

    @staticmethod
    def forward(attrs, x):
        mu = np.mean(x, axis=attrs["axis"], keepdims=True)
        d = x - mu
        out = np.mean(d * d, axis=attrs["axis"], keepdims=attrs["keepdims"])
        return out, d

    @staticmethod
    def vjp(attrs, d, g, vals, needs):
        x = vals[0]
        ge = _expand_reduced(g, x, attrs["axis"], attrs["keepdims"])
        return (2.0 * d * ge / _count(x, attrs["axis"]),)


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(attrs, x):
        axis = attrs["axis"]
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        s = e / np.sum(e, axis=axis, keepdims=True)
        return s, s

    @staticmethod
    def vjp(attrs, s, g, vals, needs):
        return (s * (g - np.sum(g * s, axis=attrs["axis"], keepdims=True)),)


@_register("l2norm")
class _L2Norm:
    @staticmethod
    def forward(attrs, x):
        n = np.sqrt(np.sum(x * x, axis=attrs["axis"]))
        return n, n

    @staticmethod
    def vjp(attrs, n, g, vals, needs):
        x = vals[0]
        axis = attrs["axis"]
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x * np.expand_dims(scale, axis),)


# ------------------------------------------------------------- sampling
def _axis_coords(x, size, lo, hi):
    """Continuous node coordinate along one axis with boundary clamping.

    Returns (lower index, fraction, d(coord)/dx with 0 where clamped).
    """
    scale = (size - 1) / (hi - lo) if size > 1 else 0.0
    p = (x - lo) * scale
    clamped = (p < 0) | (p > size - 1)
    pc = np.clip(p, 0, size - 1)
    i0 = np.clip(np.floor(pc), 0, max(size - 2, 0)).astype(np.int64)
    t = pc - i0
    dp = np.where(clamped, 0.0, scale)
    return i0, t, dp


def _factors(t, dp, order):
    if order == 0:
        return (1.0 - t, t)
    if order == 1:
        return (-dp, dp)
    z = np.zeros_like(t)
    return (z, z)


@_register("bilinear")
class _Bilinear:
    """Pixel-aligned sampling: maps [K,C,H,W], uv [K,P,2] in [-1,1]^2 -> [K,P,C].

    ``u`` runs along the width, ``v`` along the height; pixel ``j`` has its
    centre at ``u = 2 (j + 0.5) / W - 1``.
    """

    @staticmethod
    def _setup(fmaps, uv):
        if fmaps.ndim != 4 or uv.ndim != 3 or uv.shape[0] != fmaps.shape[0] or uv.shape[2] != 2:
            raise ShapeError(f"bilinear: maps {fmaps.shape} incompatible with uv {uv.shape}")
        k, c, h, w = fmaps.shape
        if h < 1 or w < 1 or c < 1:
            raise ShapeError("bilinear: empty feature map")
        # u in [-1, 1] -> pixel coordinate (u + 1) W / 2 - 0.5
        j0, tx, dx = _axis_coords(uv[..., 0], w, -1.0 + 1.0 / w, 1.0 - 1.0 / w)
        i0, ty, dy = _axis_coords(uv[..., 1], h, -1.0 + 1.0 / h, 1.0 - 1.0 / h)
        if w == 1:
            dx = np.zeros_like(dx)
        if h == 1:
            dy = np.zeros_like(dy)
        j1 = np.minimum(j0 + 1, w - 1)
        i1 = np.minimum(i0 + 1, h - 1)
        kk = np.arange(k)[:, None] * (h * w)
        idx = [kk + i0 * w + j0, kk + i0 * w + j1, kk + i1 * w + j0, kk + i1 * w + j1]
        flat = fmaps.transpose(0, 2, 3, 1).reshape(k * h * w, c)
        return flat, idx, (tx, dx), (ty, dy)

    @staticmethod
    def _weights(tx, dx, ty, dy, ox, oy):
        fx = _factors(tx, dx, ox)
        fy = _factors(ty, dy, oy)
        return [fy[0] * fx[0], fy[0] * fx[1], fy[1] * fx[0], fy[1] * fx[1]]

    @staticmethod
    def forward(attrs, fmaps, uv):
        flat, idx, (tx, dx), (ty, dy) = _Bilinear._setup(fmaps, uv)
        ws = _Bilinear._weights(tx, dx, ty, dy, 0, 0)
        out = sum(w[..., None] * flat[i] for w, i in zip(ws, idx))
        return out, (flat, idx, tx, dx, ty, dy)

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        fmaps, uv = vals
        flat, idx, tx, dx, ty, dy = saved
        k, c, h, w = fmaps.shape
        gmaps = guv = None
        if needs[0]:
            ws = _Bilinear._weights(tx, dx, ty, dy, 0, 0)
            rows = np.concatenate([i.ravel() for i in idx])
            cols = np.tile(np.arange(g.shape[0] * g.shape[1]), 4)
            wts = np.concatenate([wt.ravel() for wt in ws])
            s = sp.csr_matrix((wts, (rows, cols)), shape=(k * h * w, g.shape[0] * g.shape[1]))
            gflat = s @ g.reshape(-1, c)
            gmaps = gflat.reshape(k, h, w, c).transpose(0, 3, 1, 2)
        if needs[1]:
            guv = np.zeros_like(uv)
            for axis, orders in ((0, (1, 0)), (1, (0, 1))):
                ws = _Bilinear._weights(tx, dx, ty, dy, *orders)
                val = sum(wt[..., None] * flat[i] for wt, i in zip(ws, idx))
                guv[..., axis] = np.sum(val * g, axis=-1)
        return gmaps, guv


@_register("trilinear")
class _Trilinear:
    """Grid sampling: grid [C,X,Y,Z] over box [lo, hi], points [P,3] -> [P,C].

    Grid nodes sit at ``lo + (hi - lo) * i / (n - 1)``. With ``deriv_axis``
    set, returns the partial derivative of the interpolant along that axis.
    """

    @staticmethod
    def _setup(attrs, grid, pts):
        if grid.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"trilinear: grid {grid.shape} incompatible with points {pts.shape}")
        if min(grid.shape[1:]) < 2:
            raise ShapeError("trilinear: grid needs at least 2 nodes per axis")
        lo, hi = attrs["lo"], attrs["hi"]
        axes = [_axis_coords(pts[:, a], grid.shape[1 + a], lo[a], hi[a]) for a in range(3)]
        return axes

    @staticmethod
    def _matrix(axes, dims, orders):
        (ix, tx, dx), (iy, ty, dy), (iz, tz, dz) = axes
        fx, fy, fz = _factors(tx, dx, orders[0]), _factors(ty, dy, orders[1]), _factors(tz, dz, orders[2])
        n = ix.size
        rows, cols, vals = [], [], []
        for a, b, c in itertools.product((0, 1), repeat=3):
            cols.append(((ix + a) * dims[1] + (iy + b)) * dims[2] + (iz + c))
            vals.append(fx[a] * fy[b] * fz[c])
            rows.append(np.arange(n))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, int(np.prod(dims))),
        )

    @staticmethod
    def _orders(attrs):
        orders = [0, 0, 0]
        if attrs["deriv_axis"] is not None:
            orders[attrs["deriv_axis"]] = 1
        return orders

    @staticmethod
    def forward(attrs, grid, pts):
        axes = _Trilinear._setup(attrs, grid, pts)
        dims = grid.shape[1:]
        flat = grid.reshape(grid.shape[0], -1).T
        s = _Trilinear._matrix(axes, dims, _Trilinear._orders(attrs))
        return np.asarray(s @ flat), (axes, s, flat)

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        grid, pts = vals
        axes, s, flat = saved
        ggrid = gpts = None
        if needs[0]:
            ggrid = np.asarray(s.T @ g).T.reshape(grid.shape)
        if needs[1]:
            gpts = np.zeros_like(pts)
            base = _Trilinear._orders(attrs)
            for a in range(3):
                orders = list(base)
                orders[a] += 1
                if orders[a] > 1:
                    continue
                sa = _Trilinear._matrix(axes, grid.shape[1:], orders)
                gpts[:, a] = np.sum(np.asarray(sa @ flat) * g, axis=1)
        return ggrid, gpts


@_register("scatter_mean")
class _ScatterMean:
    """Average rows of ``values`` [N,C] into flat voxel slots -> grid [C,*grid_shape]."""

    @staticmethod
    def forward(attrs, values):
        idx = attrs["voxel_index"]
        shape = attrs["grid_shape"]
        nvox = int(np.prod(shape))
        if values.ndim != 2 or idx.shape != (values.shape[0],):
            raise ShapeError(f"scatter_mean: values {values.shape} vs index {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= nvox):
            raise ShapeError("scatter_mean: voxel index out of range")
        counts = np.bincount(idx, minlength=nvox)
        s = sp.csr_matrix(
            (1.0 / counts[idx], (idx, np.arange(idx.size))), shape=(nvox, idx.size)
        )
        out = np.asarray(s @ values).T.reshape((values.shape[1],) + tuple(shape))
        return out, s

    @staticmethod
    def vjp(attrs, s, g, vals, needs):
        c = g.shape[0]
        return (np.asarray(s.T @ g.reshape(c, -1).T),)


# -------------------------------------------------------------- rotations
def _rodrigues_coeffs(s):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives in s = t^2."""
    small = s < 1e-6
    t = np.sqrt(np.where(small, 1.0, s))
    a = np.where(small, 1 - s / 6 + s * s / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - s / 24 + s * s / 720, (1 - np.cos(t)) / np.where(small, 1.0, s))
    ss = np.where(small, 1.0, s)
    da = np.where(small, -1 / 6 + s / 60 - s * s / 1680, (np.cos(t) - a) / (2 * ss))
    db = np.where(small, -1 / 24 + s / 360 - s * s / 13440, (a - 2 * b) / (2 * ss))
    return a, b, da, db


def skew(v: np.ndarray) -> np.ndarray:
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


@_register("rodrigues")
class _Rodrigues:
    """Axis-angle vectors [J,3] -> rotation matrices [J,3,3]."""

    @staticmethod
    def forward(attrs, r):
        if r.shape[-1] != 3:
            raise ShapeError(f"rodrigues: expected [...,3], got {r.shape}")
        s = np.sum(r * r, axis=-1)
        a, b, _, _ = _rodrigues_coeffs(s)
        k = skew(r)
        outer = r[..., :, None] * r[..., None, :]
        eye = np.broadcast_to(np.eye(3), k.shape)
        return eye + a[..., None, None] * k + b[..., None, None] * (outer - s[..., None, None] * eye), None

    @staticmethod
    def vjp(attrs, saved, g, vals, needs):
        r = vals[0]
        s = np.sum(r * r, axis=-1)
        a, b, da, db = _rodrigues_coeffs(s)
        k = skew(r)
        eye = np.eye(3)
        outer = r[..., :, None] * r[..., None, :]
        w = np.stack([g[..., 2, 1] - g[..., 1, 2], g[..., 0, 2] - g[..., 2, 0], g[..., 1, 0] - g[..., 0, 1]], -1)
        gk = np.sum(g * k, axis=(-2, -1))
        gsym = np.sum(g * (outer - s[..., None, None] * eye), axis=(-2, -1))
        gr_r = np.einsum("...ab,...b->...a", g, r)
        gtr_r = np.einsum("...ba,...b->...a", g, r)
        trace = np.trace(g, axis1=-2, axis2=-1)
        out = (
            2 * r * (da * gk + db * gsym)[..., None]
            + a[..., None] * w
            + b[..., None] * (gr_r + gtr_r - 2 * r * trace[..., None])
        )
        return (out,)


# ---------------------------------------------------------- soft silhouette
def _pixel_coords(uv, size):
    h, w = size
    return np.stack([(uv[:, 0] + 1) * w / 2 - 0.5, (uv[:, 1] + 1) * h / 2 - 0.5], -1)


def _face_distances(q, tri):
    """Signed distance (pixels) of points q to triangles tri [F,3,2].

    ``q`` is [M,2] shared by all faces or [F,M,2] per face. Returns d [F,M]
    (negative inside) plus the pieces needed for the gradient: sign, argmin
    edge, clamped edge parameter and offset to the closest edge point.
    """
    q = q if q.ndim == 3 else q[None]
    best = None
    for e in range(3):
        a = tri[:, e][:, None, :]
        b = tri[:, (e + 1) % 3][:, None, :]
        ed = b - a
        wv = q - a
        ee = np.sum(ed * ed, -1)
        t = np.clip(np.sum(wv * ed, -1) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        diff = wv - t[..., None] * ed
        dist = np.sqrt(np.sum(diff * diff, -1))
        cross = ed[..., 0] * wv[..., 1] - ed[..., 1] * wv[..., 0]
        if best is None:
            best = [dist, np.zeros(dist.shape, np.int64), t, diff]
            pos = cross >= 0
            neg = cross <= 0
        else:
            closer = dist < best[0]
            best[0] = np.where(closer, dist, best[0])
            best[1] = np.where(closer, e, best[1])
            best[2] = np.where(closer, t, best[2])
            best[3] = np.where(closer[..., None], diff, best[3])
            pos &= cross >= 0
            neg &= cross <= 0
    area2 = (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1]) - (
        tri[:, 1, 1] - tri[:, 0, 1]
    ) * (tri[:, 2, 0] - tri[:, 0, 0])
    inside = (pos | neg) & (area2[:, None] != 0)
    sign = np.where(inside, -1.0, 1.0)
    return sign * best[0], sign, best


TILE = 8


def _tile_pairs(tri, size, reach):
    """(face, tile) pairs whose reach-padded face box overlaps the tile.

    Returns face ids [P], pixel ids [P,T*T] (padded with -1) and the pixel
    centres [P,T*T,2].
    """
    h, w = size
    ty, tx = -(-h // TILE), -(-w // TILE)
    lo = tri.min(axis=1) - reach
    hi = tri.max(axis=1) + reach
    # tile k spans pixel centres [k*TILE, k*TILE + TILE - 1]
    x0 = np.clip(np.ceil((lo[:, 0] - TILE + 1) / TILE), 0, tx).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] / TILE) + 1, 0, tx).astype(np.int64)
    y0 = np.clip(np.ceil((lo[:, 1] - TILE + 1) / TILE), 0, ty).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] / TILE) + 1, 0, ty).astype(np.int64)
    nx, ny = np.maximum(x1 - x0, 0), np.maximum(y1 - y0, 0)
    counts = nx * ny
    face = np.repeat(np.arange(len(tri)), counts)
    if face.size == 0:
        return face, np.zeros((0, TILE * TILE), np.int64), np.zeros((0, TILE * TILE, 2))
    local = np.arange(face.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = x0[face] + local % nx[face]
    tile_y = y0[face] + local // nx[face]
    oy, ox = np.divmod(np.arange(TILE * TILE), TILE)
    px = tile_x[:, None] * TILE + ox
    py = tile_y[:, None] * TILE + oy
    valid = (px < w) & (py < h)
    pix = np.where(valid, py * w + px, -1)
    centres = np.stack([px, py], -1).astype(np.float64)
    return face, pix, centres


@_register("soft_silhouette")
class _SoftSilhouette:
    """Soft coverage image of projected triangles.

    coverage(p) = 1 - prod_f (1 - sigmoid(-d_f(p) / tau)) over nearby faces,
    with d_f the signed pixel distance from pixel centre p to face f. A face
    counts as nearby through a smoothstep window that fades its outside
    contribution to zero at ``reach`` pixels.
    """

    PAIRS = 1 << 13

    @staticmethod
    def _reach(attrs):
        return attrs.get("reach", attrs["tau"] / 4)

    @staticmethod
    def _terms(d, tau, reach):
        r = np.clip(d / reach, 0.0, 1.0)
        window = 1.0 - r * r * (3.0 - 2.0 * r)
        dwindow = np.where((d > 0) & (d < reach), -6.0 * r * (1.0 - r) / reach, 0.0)
        soft = np.logaddexp(0.0, -d / tau)  # -log(1 - sigmoid(-d/tau))
        return soft * window, -expit(-d / tau) / tau * window + soft * dwindow

    @staticmethod
    def _setup(attrs, uv):
        faces = attrs["faces"]
        if uv.ndim != 2 or uv.shape[1] != 2:
            raise ShapeError(f"soft_silhouette: expected uv [V,2], got {uv.shape}")
        if faces.size and faces.max() >= uv.shape[0]:
            raise ShapeError("soft_silhouette: face index out of range")
        tri = _pixel_coords(uv, attrs["size"])[faces] if faces.size else np.zeros((0, 3, 2))
        return tri, _tile_pairs(tri, attrs["size"], _SoftSilhouette._reach(attrs))

    @staticmethod
    def _chunks(n):
        for start in range(0, n, _SoftSilhouette.PAIRS):
            yield slice(start, min(start + _SoftSilhouette.PAIRS, n))

    @staticmethod
    def forward(attrs, uv):
        size, tau = attrs["size"], attrs["tau"]
        reach = _SoftSilhouette._reach(attrs)
        tri, (face, pix, centres) = _SoftSilhouette._setup(attrs, uv)
        npix = size[0] * size[1]
        log_keep = np.zeros(npix + 1)  # last slot absorbs padding
        for sl in _SoftSilhouette._chunks(face.size):
            d, _, _ = _face_distances(centres[sl], tri[face[sl]])
            term, _ = _SoftSilhouette._terms(d, tau, reach)
            np.add.at(log_keep, np.where(pix[sl] >= 0, pix[sl], npix), -term)
        keep = np.exp(log_keep[:npix])
        return (1.0 - keep).reshape(size), keep

    @staticmethod
    def vjp(attrs, keep, g, vals, needs):
        uv = vals[0]
        faces, size, tau = attrs["faces"], attrs["size"], attrs["tau"]
        reach = _SoftSilhouette._reach(attrs)
        h, w = size
        tri, (face, pix, centres) = _SoftSilhouette._setup(attrs, uv)
        glog = np.append(-keep * g.ravel(), 0.0)  # d cov / d log_keep = -keep
        gtri = np.zeros_like(tri)
        for sl in _SoftSilhouette._chunks(face.size):
            d, sign, (dist, edge, t, diff) = _face_distances(centres[sl], tri[face[sl]])
            _, dterm = _SoftSilhouette._terms(d, tau, reach)
            gd = -glog[np.where(pix[sl] >= 0, pix[sl], h * w)] * dterm * sign
            n = diff / np.where(dist > 0, dist, 1.0)[..., None]
            n = np.where((dist > 0)[..., None], n, 0.0)
            gpair = np.zeros((d.shape[0], 3, 2))
            for e in range(3):
                m = (edge == e)[..., None]
                gpair[:, e] -= np.sum(np.where(m, (1.0 - t)[..., None] * n * gd[..., None], 0.0), axis=1)
                gpair[:, (e + 1) % 3] -= np.sum(np.where(m, t[..., None] * n * gd[..., None], 0.0), axis=1)
            np.add.at(gtri, face[sl], gpair)
        guv_pix = np.zeros_like(uv)
        np.add.at(guv_pix, faces.ravel(), gtri.reshape(-1, 2))
        guv = guv_pix * np.array([w / 2.0, h / 2.0])
        return (guv,)


def hard_coverage(uv: np.ndarray, faces: np.ndarray, size) -> np.ndarray:
    """Binary image of pixel centres lying inside any triangle (uv in [-1,1]^2)."""
    faces = np.asarray(faces, np.int64)
    npix = size[0] * size[1]
    inside = np.zeros(npix + 1, dtype=bool)
    if faces.size:
        tri = _pixel_coords(np.asarray(uv, np.float64), size)[faces]
        face, pix, centres = _tile_pairs(tri, size, 0.0)
        for sl in _SoftSilhouette._chunks(face.size):
            d, _, _ = _face_distances(centres[sl], tri[face[sl]])
            hit = (d < 0) & (pix[sl] >= 0)
            inside[pix[sl][hit]] = True
    return inside[:npix].reshape(size)
