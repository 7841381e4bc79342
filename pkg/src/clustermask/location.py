"""Reference masks predicted from cluster centers and coordinate injection."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import DenseArray, ShapeError


@dataclass(frozen=True)
class ReferenceState:
    """Pre-sigmoid embedding ``e`` (N x 2M) and its coordinates ``r_c = sigmoid(e)``.

    Columns ``[0, M)`` hold h-coordinates, ``[M, 2M)`` hold w-coordinates.
    """

    e: DenseArray
    r_c: DenseArray
    M: int

    @classmethod
    def from_embedding(cls, e: DenseArray, M: int) -> "ReferenceState":
        if e.ndim != 2 or e.shape[1] != 2 * M:
            raise ShapeError(f"reference embedding must be N x {2 * M}, got {e.shape}")
        return cls(e=e, r_c=T.sigmoid(e), M=M)

    @classmethod
    def initial(cls, N: int, M: int = 8, dtype=np.float64) -> "ReferenceState":
        return cls.from_embedding(DenseArray(np.zeros((N, 2 * M), dtype=dtype)), M)

    @property
    def h(self) -> DenseArray:
        return T.take(self.r_c, np.arange(self.M), axis=1)

    @property
    def w(self) -> DenseArray:
        return T.take(self.r_c, np.arange(self.M, 2 * self.M), axis=1)


@lru_cache(maxsize=32)
def _grid(height: int, width: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.stack([(ii.ravel() + 0.5) / height, (jj.ravel() + 0.5) / width], axis=1)
    grid.flags.writeable = False
    return grid


@dataclass(frozen=True)
class PixelCoordGrid:
    """Fixed pixel-center coordinates ``((i + 0.5) / H, (j + 0.5) / W)``, row-major."""

    height: int
    width: int

    @property
    def coords(self) -> np.ndarray:
        return _grid(self.height, self.width)

    def r_p(self, dtype=np.float64) -> DenseArray:
        # a constant: never on the tape
        return DenseArray(self.coords, dtype=dtype)


def reference_mlp(centers: DenseArray, mlp: Mapping[str, DenseArray]) -> DenseArray:
    """Two affine layers with GeLU between, widths D -> D -> 2M."""
    if mlp["w1"].shape[0] != centers.shape[1]:
        raise ShapeError(f"reference MLP expects width {mlp['w1'].shape[0]}, centers are {centers.shape}")
    hidden = T.gelu(T.affine(centers, mlp["w1"], mlp["b1"]))
    return T.affine(hidden, mlp["w2"], mlp["b2"])


def update_reference_masks(
    state: ReferenceState, centers: DenseArray, mlp: Mapping[str, DenseArray]
) -> ReferenceState:
    delta = reference_mlp(centers, mlp)
    if delta.shape != state.e.shape:
        raise ShapeError(f"reference MLP output {delta.shape} vs embedding {state.e.shape}")
    return ReferenceState.from_embedding(T.add(state.e, delta), state.M)


def inject_coordinates(
    F: DenseArray,
    C: DenseArray,
    grid: PixelCoordGrid,
    ref: ReferenceState,
    conv_f: Mapping[str, DenseArray],
    conv_c: Mapping[str, DenseArray],
) -> tuple[DenseArray, DenseArray]:
    """Concatenate coordinates onto features and centers, then apply 1x1 convs."""
    if F.shape[0] != grid.height * grid.width:
        raise ShapeError(f"{F.shape[0]} pixel rows but grid is {grid.height}x{grid.width}")
    D = F.shape[1]
    if conv_f["w"].shape != (D + 2, D):
        raise ShapeError(f"pixel coord-conv must be {(D + 2, D)}, got {conv_f['w'].shape}")
    if conv_c["w"].shape != (C.shape[1] + 2 * ref.M, C.shape[1]):
        raise ShapeError(f"center coord-conv must be {(C.shape[1] + 2 * ref.M, C.shape[1])}, got {conv_c['w'].shape}")
    F_new = T.affine(T.concat([F, grid.r_p(F.dtype)], axis=1), conv_f["w"], conv_f["b"])
    C_new = T.affine(T.concat([C, ref.r_c], axis=1), conv_c["w"], conv_c["b"])
    return F_new, C_new
