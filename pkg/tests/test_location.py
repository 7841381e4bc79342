import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clustermask import tensor as T
from clustermask.location import (
    PixelCoordGrid,
    ReferenceState,
    inject_coordinates,
    update_reference_masks,
)
from clustermask.tensor import DenseArray, ShapeError, finite_diff_check


def _mlp(rng, D, M, zero=False):
    shapes = {"w1": (D, D), "b1": (D,), "w2": (D, 2 * M), "b2": (2 * M,)}
    return {k: DenseArray(np.zeros(s) if zero else rng.normal(size=s)) for k, s in shapes.items()}


def test_zero_mlp_keeps_reference(rng):
    e = DenseArray(rng.normal(size=(3, 8)))
    state = ReferenceState.from_embedding(e, 4)
    new = update_reference_masks(state, DenseArray(rng.normal(size=(3, 5))), _mlp(rng, 5, 4, zero=True))
    assert np.array_equal(new.e.data, e.data)
    assert np.array_equal(new.r_c.data, state.r_c.data)


def test_zero_embedding_gives_half():
    state = ReferenceState.initial(N=4, M=3)
    assert np.array_equal(state.r_c.data, np.full((4, 6), 0.5))


def test_reference_gradient_wrt_centers(rng):
    mlp = _mlp(rng, 5, 2)
    e = DenseArray(rng.normal(size=(3, 4)))

    def f(C):
        return T.reduce(update_reference_masks(ReferenceState.from_embedding(e, 2), C, mlp).r_c, "sum")

    assert finite_diff_check(f, DenseArray(rng.normal(size=(3, 5)))) < 1e-5


def test_residual_accumulation(rng):
    mlp = _mlp(rng, 4, 2)
    C = DenseArray(rng.normal(size=(3, 4)))
    e0 = rng.normal(size=(3, 4))
    state = ReferenceState.from_embedding(DenseArray(e0), 2)
    delta = update_reference_masks(ReferenceState.from_embedding(DenseArray(np.zeros((3, 4))), 2), C, mlp).e.data
    for _ in range(3):
        state = update_reference_masks(state, C, mlp)
    assert np.allclose(state.e.data, e0 + 3 * delta, atol=1e-12)


def test_reference_layout(rng):
    state = ReferenceState.from_embedding(DenseArray(rng.normal(size=(2, 6))), 3)
    assert np.array_equal(state.h.data, state.r_c.data[:, :3])
    assert np.array_equal(state.w.data, state.r_c.data[:, 3:])


def test_reference_shape_error():
    with pytest.raises(ShapeError):
        ReferenceState.from_embedding(DenseArray(np.zeros((2, 5))), 3)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-700, 700)))
def test_reference_coordinates_stay_inside_unit_interval(e):
    r = ReferenceState.from_embedding(DenseArray(e), 2).r_c.data
    # sigmoid saturates to exactly 0/1 in floating point only for |e| > ~37
    inside = np.abs(e) < 30
    assert ((r[inside] > 0) & (r[inside] < 1)).all()
    assert ((r >= 0) & (r <= 1)).all()


def test_grid_pixel_centers():
    g = PixelCoordGrid(2, 2).coords
    assert g.tolist() == [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]]


def test_grid_reproducible_and_off_tape():
    a, b = PixelCoordGrid(3, 5), PixelCoordGrid(3, 5)
    assert np.array_equal(a.coords, b.coords)
    assert not a.r_p().requires_grad


def test_projection_identity_ignores_coordinates(rng):
    D, M = 4, 2
    F, C = DenseArray(rng.normal(size=(6, D))), DenseArray(rng.normal(size=(3, D)))
    conv_f = {"w": DenseArray(np.vstack([np.eye(D), np.zeros((2, D))])), "b": DenseArray(np.zeros(D))}
    conv_c = {"w": DenseArray(np.vstack([np.eye(D), np.zeros((2 * M, D))])), "b": DenseArray(np.zeros(D))}
    F2, C2 = inject_coordinates(F, C, PixelCoordGrid(2, 3), ReferenceState.initial(3, M), conv_f, conv_c)
    assert np.array_equal(F2.data, F.data) and np.array_equal(C2.data, C.data)
    assert F2.shape[1] == D and C2.shape[1] == D


def test_injection_gradient(rng):
    D, M = 3, 2
    grid = PixelCoordGrid(2, 2)
    w = DenseArray(rng.normal(size=(4, D)))
    v = DenseArray(rng.normal(size=(2, D)))

    def f(F, C, e, wf, bf, wc, bc):
        F2, C2 = inject_coordinates(F, C, grid, ReferenceState.from_embedding(e, M), {"w": wf, "b": bf}, {"w": wc, "b": bc})
        return T.add(T.reduce(T.mul(F2, w), "sum"), T.reduce(T.mul(C2, v), "sum"))

    leaves = [(4, D), (2, D), (2, 2 * M), (D + 2, D), (D,), (D + 2 * M, D), (D,)]
    assert finite_diff_check(f, [DenseArray(rng.normal(size=s)) for s in leaves]) < 1e-5


def test_injection_width_mismatch(rng):
    bad = {"w": DenseArray(np.zeros((4, 3))), "b": DenseArray(np.zeros(3))}
    with pytest.raises(ShapeError):
        inject_coordinates(DenseArray(np.zeros((4, 3))), DenseArray(np.zeros((2, 3))), PixelCoordGrid(2, 2),
                           ReferenceState.initial(2, 1), bad, bad)
