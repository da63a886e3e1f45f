"""Sparse voxel convolutions on top of the dense autodiff core.

Active coordinates are looked up through a sorted-key coordinate map; each
convolution gathers its neighbourhood columns (missing neighbours read zero)
and applies one GEMM. Output coordinates always equal input coordinates.
"""
from __future__ import annotations

from itertools import product

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import ColumnLinear, ColumnNorm, Module, kaiming, parameter
from .voxels import linear_index

OFFSETS_3 = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
CHILD_OFFSETS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)


class CoordMap:
    """Maps voxel coordinates to row indices of an active set (or -1)."""

    def __init__(self, coords: np.ndarray, dims):
        self.dims = tuple(int(d) for d in dims)
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = linear_index(self.coords, self.dims)
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]
        if len(self._keys) > 1 and np.any(self._keys[1:] == self._keys[:-1]):
            raise ValueError("duplicate voxel coordinates in active set")

    def __len__(self) -> int:
        return len(self.coords)

    def lookup(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.int64)
        shape = query.shape[:-1]
        q = query.reshape(-1, 3)
        inside = np.all((q >= 0) & (q < np.asarray(self.dims)), axis=1)
        out = np.full(len(q), -1, dtype=np.int64)
        if len(self._keys) and inside.any():
            keys = linear_index(q[inside], self.dims)
            pos = np.searchsorted(self._keys, keys)
            pos_c = np.minimum(pos, len(self._keys) - 1)
            hit = self._keys[pos_c] == keys
            res = np.where(hit, self._order[pos_c], -1)
            out[inside] = res
        return out.reshape(shape)

    def neighbors(self, offsets: np.ndarray = OFFSETS_3) -> np.ndarray:
        """(K, N) row indices of ``coords + offsets[k]``."""
        return self.lookup(self.coords[None, :, :] + offsets[:, None, :])


class SparseContext:
    """Neighbour tables for one active set and its stride-2 parent level."""

    def __init__(self, coords: np.ndarray, dims):
        self.map = CoordMap(coords, dims)
        self.coords = self.map.coords
        self.dims = self.map.dims
        self.nbr = self.map.neighbors()
        parent = self.coords // 2
        pdims = tuple((d + 1) // 2 for d in self.dims)
        if len(parent):
            plin, self.parent_of = np.unique(linear_index(parent, pdims), return_inverse=True)
            self.parent_of = self.parent_of.reshape(-1)
            pcoords = np.stack(np.unravel_index(plin, pdims), axis=1)
        else:
            pcoords = np.zeros((0, 3), dtype=np.int64)
            self.parent_of = np.zeros(0, dtype=np.int64)
        self.parent_map = CoordMap(pcoords, pdims)
        self.parent_nbr = self.parent_map.neighbors()
        children = pcoords[None, :, :] * 2 + CHILD_OFFSETS[:, None, :]
        self.children = self.map.lookup(children)

    def __len__(self) -> int:
        return len(self.coords)


class SparseConv(Module):
    """Convolution over a fixed tap table ([K, N] indices into the input columns)."""

    def __init__(self, cin: int, cout: int, taps: int, rng):
        self.weight = kaiming(rng, (cout, cin * taps), cin * taps)
        self.bias = parameter(np.zeros(cout))
        self.taps = taps

    def forward(self, x: Tensor, table: np.ndarray) -> Tensor:
        cin = x.shape[0]
        n = table.shape[1]
        if n == 0:
            return Tensor(np.zeros((self.weight.shape[0], 0), dtype=x.dtype))
        cols = ops.gather_columns(x, table)  # [C, K, N]
        return ops.column_linear(ops.reshape(cols, (cin * self.taps, n)), self.weight, self.bias)


class SparseEncoderBlock(Module):
    """Feature branch (two submanifold 3^3 convs) beside a geometry branch
    (stride-2 down conv, coarse conv, nearest upsample), fused by a 1x1 layer."""

    def __init__(self, cin: int, cout: int, rng):
        self.f1 = SparseConv(cin, cout, 27, rng)
        self.n1 = ColumnNorm(cout)
        self.f2 = SparseConv(cout, cout, 27, rng)
        self.n2 = ColumnNorm(cout)
        self.down = SparseConv(cin, cout, 8, rng)
        self.n3 = ColumnNorm(cout)
        self.coarse = SparseConv(cout, cout, 27, rng)
        self.n4 = ColumnNorm(cout)
        self.fuse = ColumnLinear(2 * cout, cout, rng)
        self.n5 = ColumnNorm(cout)

    def forward(self, x: Tensor, ctx: SparseContext) -> Tensor:
        if len(ctx) == 0:
            return Tensor(np.zeros((self.fuse.weight.shape[0], 0), dtype=x.dtype))
        f = ops.relu(self.n1(self.f1(x, ctx.nbr)))
        f = ops.relu(self.n2(self.f2(f, ctx.nbr)))
        g = ops.relu(self.n3(self.down(x, ctx.children)))
        g = ops.relu(self.n4(self.coarse(g, ctx.parent_nbr)))
        g = ops.gather_columns(g, ctx.parent_of)
        return ops.relu(self.n5(self.fuse(ops.concat([f, g], axis=0))))
