import numpy as np
import pytest
from hypothesis import given, strategies as st

from metricpose.errors import EmptyRender
from metricpose.geometry import CAMERA_METRIC, CameraIntrinsics, TriangleMesh
from metricpose.lift import backproject_pixel
from metricpose.raster import ImageGrid, backproject_grid, rasterize, render_attributes, render_depth

from conftest import ray_triangle_depth

K = CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


def mesh(V, F):
    return TriangleMesh(np.asarray(V, float), np.asarray(F), CAMERA_METRIC)


def pixel_triangle(u0, v0, u1, v1, u2, v2, z):
    """Fronto-parallel triangle at depth z with the given pixel-space corners."""
    return backproject_pixel(np.array([u0, u1, u2], float), np.array([v0, v1, v2], float), z, K)


def random_triangle(rng):
    uv = rng.uniform(-10, [74, 58], (3, 2))
    z = rng.uniform(0.5, 5.0, 3)
    return backproject_pixel(uv[:, 0], uv[:, 1], z, K)


def raycast(V):
    depth = np.full((K.height, K.width), np.inf)
    for v in range(K.height):
        for u in range(K.width):
            d = np.array([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, 1.0])
            z = ray_triangle_depth(np.zeros(3), d, *V)
            if z is not None:
                depth[v, u] = z
    return depth


def edge_margin(V, u, v):
    """Smallest barycentric coordinate of pixel center (u, v) in screen space."""
    p = K.project(V)
    q = np.array([u + 0.5, v + 0.5])
    T = np.c_[p[1] - p[0], p[2] - p[0]]
    b1, b2 = np.linalg.solve(T, q - p[0])
    return min(1 - b1 - b2, b1, b2)


def test_single_triangle_constant_depth():
    V = pixel_triangle(20, 10, 50, 10, 32, 40, 2.0)
    d = render_depth(mesh(V, [[0, 1, 2]]), K)
    assert d.valid[24, 32]
    assert d.plane[24, 32] == 2.0
    assert np.all(d.plane[d.valid] == np.float32(2.0))


def test_nearer_triangle_wins():
    A = pixel_triangle(0, 0, 60, 0, 0, 45, 2.0)
    B = pixel_triangle(0, 0, 60, 0, 0, 45, 3.0)
    d = render_depth(mesh(np.r_[B, A], [[0, 1, 2], [3, 4, 5]]), K)
    assert np.all(d.plane[d.valid] == 2.0)


def test_randomized_triangles_match_raycast():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(40):
        V = random_triangle(rng)
        frags = rasterize((V, [[0, 1, 2]]), K)
        ref = raycast(V)
        both = frags.covered & np.isfinite(ref)
        rel = np.abs(frags.depth[both] - ref[both]) / ref[both]
        assert rel.max(initial=0) < 1e-6
        for v, u in np.argwhere(frags.covered != np.isfinite(ref)):
            assert abs(edge_margin(V, u, v)) < 1e-9
        checked += both.sum()
    assert checked > 1000


def test_shared_edge_claimed_once():
    # a square split along its diagonal; the diagonal passes through pixel centers
    V = pixel_triangle(8.5, 8.5, 40.5, 8.5, 40.5, 40.5, 2.0)
    W = pixel_triangle(8.5, 8.5, 40.5, 40.5, 8.5, 40.5, 2.0)
    P = np.r_[V, W[[2]]]
    m = mesh(P, [[0, 1, 2], [0, 2, 3]])
    frags = rasterize(m, K)
    hits = np.zeros((K.height, K.width), int)
    for f in range(2):
        hits += rasterize((P, m.faces[[f]]), K).covered
    # diagonal centers lie on both triangles' edges yet only one claims each
    assert hits.max() == 1
    assert np.array_equal(frags.covered, hits > 0)
    k = np.arange(9, 40)
    assert frags.covered[k, k].all()


def test_top_left_rule_splits_tiling_without_overlap():
    # fan of triangles around a center on a pixel center: every edge is shared
    c = (30.5, 20.5)
    ring = [(10.5, 5.5), (50.5, 5.5), (55.5, 35.5), (30.5, 45.5), (5.5, 35.5)]
    P = np.r_[pixel_triangle(*c, *ring[0], *ring[1], 2.0)[[0]], backproject_pixel(*np.array(ring, float).T, 2.0, K)]
    faces = [[0, 1 + i, 1 + (i + 1) % 5] for i in range(5)]
    counts = np.zeros((K.height, K.width), int)
    for f in faces:
        counts += rasterize((P, [f]), K).covered
    owners = rasterize((P, faces), K)
    # each pixel covered by the union is owned by exactly one face that covers it
    assert np.array_equal(owners.covered, counts > 0)
    singles = []
    for i, f in enumerate(faces):
        singles.append(rasterize((P, [f]), K).covered)
    # the top-left rule gives each shared center to exactly one face in isolation too
    assert np.stack(singles).sum(axis=0).max() == 1


def test_occlusion_is_per_pixel_minimum():
    rng = np.random.default_rng(11)
    for _ in range(20):
        A = np.r_[random_triangle(rng), random_triangle(rng)]
        B = np.r_[random_triangle(rng), random_triangle(rng)]
        FA = [[0, 1, 2], [3, 4, 5]]
        da = rasterize((A, FA), K).depth
        db = rasterize((B, FA), K).depth
        joint = rasterize((np.r_[A, B], FA + [[6, 7, 8], [9, 10, 11]]), K).depth
        assert np.array_equal(joint, np.minimum(da, db))


@given(st.integers(0, 2**32 - 1), st.integers(2, 7))
def test_thread_count_does_not_change_output(seed, threads):
    rng = np.random.default_rng(seed)
    V = np.concatenate([random_triangle(rng) for _ in range(6)])
    F = np.arange(18).reshape(6, 3)
    A = rng.random((18, 3))
    one = rasterize((V, F), K, A, threads=1)
    many = rasterize((V, F), K, A, threads=threads)
    assert np.array_equal(one.depth, many.depth)
    assert np.array_equal(one.face, many.face)
    assert np.array_equal(one.attributes, many.attributes)


def test_constant_attribute():
    V = pixel_triangle(5, 5, 60, 5, 30, 45, 2.0)
    V[1, 2] = 3.0
    g = render_attributes(mesh(V, [[0, 1, 2]]), np.full((3, 3), 0.5), K)
    assert np.all(g.data[g.valid] == np.float32(0.5))


def test_attribute_linear_on_fronto_parallel_square():
    z = 2.0
    P = backproject_pixel(np.array([4.0, 60, 60, 4]), np.array([4.0, 4, 44, 44]), z, K)
    m = mesh(P, [[0, 1, 2], [0, 2, 3]])
    g = render_attributes(m, P, K)  # attributes = camera positions
    v, u = np.nonzero(g.valid)
    expected = backproject_pixel(u + 0.5, v + 0.5, z, K)
    np.testing.assert_allclose(g.data[v, u], expected, atol=1e-6)


def test_depth_agrees_with_rendered_positions():
    rng = np.random.default_rng(2)
    V = np.concatenate([random_triangle(rng) for _ in range(5)])
    m = mesh(V, np.arange(15).reshape(5, 3))
    d = rasterize(m, K)
    a = rasterize(m, K, V)
    cov = d.covered
    np.testing.assert_allclose(a.attributes[cov][:, 2], d.depth[cov], rtol=1e-9)


def test_backproject_grid_examples():
    g = ImageGrid.empty(K.width, K.height)
    pix, pts = backproject_grid(g, K)
    assert len(pix) == 0 and pts.shape == (0, 3)
    K2 = CameraIntrinsics(100.0, 100.0, 10.5, 10.5, 20, 20)
    data = np.zeros((20, 20))
    valid = np.zeros((20, 20), bool)
    data[10, 10], valid[10, 10] = 2.0, True
    pix, pts = backproject_grid(ImageGrid(data, valid), K2)
    np.testing.assert_array_equal(pix, [[10, 10]])
    np.testing.assert_allclose(pts, [[0, 0, 2]])


def test_backprojected_points_lie_on_surface():
    rng = np.random.default_rng(9)
    V = random_triangle(rng)
    while True:
        try:
            d = render_depth(mesh(V, [[0, 1, 2]]), K)
            break
        except EmptyRender:
            V = random_triangle(rng)
    _, pts = backproject_grid(d, K)
    n = np.cross(V[1] - V[0], V[2] - V[0])
    n /= np.linalg.norm(n)
    # float32 storage of the depth dominates the error
    assert np.abs((pts - V[0]) @ n).max() < 1e-6 * pts[:, 2].max() * 10


def test_empty_render_and_grid_validation():
    V = pixel_triangle(-50, -50, -40, -50, -45, -40, 2.0)
    with pytest.raises(EmptyRender):
        render_depth(mesh(V, [[0, 1, 2]]), K)
    behind = pixel_triangle(5, 5, 60, 5, 30, 45, 2.0) * [1, 1, -1]
    with pytest.raises(ValueError):
        rasterize((behind, [[0, 1, 2]]), K)
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((4, 4, 2)), np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((4, 4)), np.zeros((4, 5), bool))
    g = ImageGrid(np.full((2, 2), np.nan), np.array([[True, False], [False, False]]))
    assert np.isnan(g.plane[0, 0]) and g.plane[1, 1] == 0.0
