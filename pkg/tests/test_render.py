import numpy as np
import pytest
from PIL import Image

from app.body.params import CameraParams
from app.core.errors import DimensionError, FormatError, ParameterError
from app.fitting.fitter import mean_params
from app.fitting.gradcheck import CHECKS, random_front_triangle
from app.render.camera import mean_camera, project, project_backward, project_jacobian
from app.render.iuv import IUVImage, decode_iuv, encode_iuv, iuv_to_png, load_iuv, save_iuv
from app.render.raster import cross2, rasterize_backward, rasterize_mesh, render_params
from app.render.soft_masks import soft_part_masks, soft_part_masks_mesh

# vertices at (x, y) = (0, 0), (0, 10), (10, 0): clockwise in image coordinates, so front-facing
CORNER_TRIANGLE = np.array([[0.0, 0.0, 1.0], [0.0, 10.0, 1.0], [10.0, 0.0, 1.0]])
CORNER_UV = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def brute_force_faces(screen, faces, size):
    """Winning face per pixel by testing every face at every pixel center"""
    height, width = size
    rows, cols = np.mgrid[0:height, 0:width]
    p = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    best_depth = np.full(p.shape[0], np.inf)
    best_face = np.full(p.shape[0], -1)
    for index, face in enumerate(faces):
        tri = screen[face]
        a, b, c = (np.broadcast_to(tri[k, :2], p.shape) for k in range(3))
        area = cross2(b[0] - a[0], c[0] - a[0])
        if not area < -1e-10:
            continue
        bary = np.stack([cross2(b - p, c - p), cross2(c - p, a - p), cross2(a - p, b - p)], axis=-1) / area
        depth = np.einsum("nk,nk->n", bary, np.broadcast_to(tri[:, 2], bary.shape))
        wins = np.all(bary >= 0.0, axis=1) & (depth < best_depth)
        best_depth[wins] = depth[wins]
        best_face[wins] = index
    return best_face.reshape(height, width)


class TestCamera:
    def test_projection_example(self):
        pixels = project(np.array([[1.0, 2.0, 5.0]]), CameraParams(100.0, 112.0, 112.0))
        np.testing.assert_allclose(pixels, [[212.0, 312.0]])

    def test_origin_goes_to_the_offset(self):
        pixels = project(np.array([[0.0, 0.0, 3.0]]), CameraParams(1.0, 0.0, 0.0))
        assert np.array_equal(pixels, [[0.0, 0.0]])

    def test_doubling_scale_doubles_distance(self, rng):
        points = rng.normal(size=(10, 3))
        near = project(points, CameraParams(50.0, 10.0, 20.0)) - [10.0, 20.0]
        far = project(points, CameraParams(100.0, 10.0, 20.0)) - [10.0, 20.0]
        np.testing.assert_allclose(far, 2.0 * near, atol=1e-12)

    def test_projection_is_affine(self, rng):
        camera = CameraParams(80.0, 5.0, -3.0)
        a, b = rng.normal(size=(2, 7, 3))
        lam = 0.3
        np.testing.assert_allclose(project(lam * a + (1 - lam) * b, camera),
                                   lam * project(a, camera) + (1 - lam) * project(b, camera), atol=1e-10)

    def test_jacobian(self):
        jac = project_jacobian(np.array([[1.0, 2.0, 5.0]]), CameraParams(100.0, 112.0, 112.0))
        np.testing.assert_allclose(jac.camera[0, :, 0], [1.0, 2.0])
        np.testing.assert_allclose(jac.camera[0, :, 1:], np.eye(2))
        np.testing.assert_allclose(jac.points[0], [[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])

    def test_backward_matches_jacobian(self, rng):
        points = rng.normal(size=(6, 3))
        camera = CameraParams(70.0, 1.0, 2.0)
        grad_pixels = rng.normal(size=(6, 2))
        grad_points, grad_camera = project_backward(grad_pixels, points, camera)
        jac = project_jacobian(points, camera)
        np.testing.assert_allclose(grad_points, np.einsum("na,nab->nb", grad_pixels, jac.points), atol=1e-12)
        np.testing.assert_allclose(grad_camera, np.einsum("na,nab->b", grad_pixels, jac.camera), atol=1e-12)

    def test_finite_differences(self):
        check = CHECKS["projection"]
        for seed in range(5):
            assert check.run(np.random.default_rng([seed, 1])) < check.tolerance

    def test_mean_camera_frames_the_body(self, small_model):
        size = (100, 80)
        camera = mean_camera(small_model.mesh.vertices, size)
        pixels = project(small_model.mesh.vertices, camera)
        height = pixels[:, 1].max() - pixels[:, 1].min()
        assert height == pytest.approx(80.0)
        assert 0.5 * (pixels[:, 1].max() + pixels[:, 1].min()) == pytest.approx(50.0)
        assert 0.5 * (pixels[:, 0].max() + pixels[:, 0].min()) == pytest.approx(40.0)


class TestRasterize:
    def test_empty_mesh_is_background(self):
        image, trace = rasterize_mesh(np.zeros((0, 3)), np.zeros((0, 3)), [], np.zeros((0, 2)), (8, 8))
        assert image.foreground_count == 0
        assert np.all(trace.face == -1)
        assert np.all(np.isinf(trace.depth))

    def test_interior_uv_equals_barycentric(self):
        image, trace = rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [3], CORNER_UV, (12, 12))
        for row, col in [(2, 1), (5, 3), (0, 0), (1, 7)]:
            x, y = col + 0.5, row + 0.5
            assert image.part[row, col] == 3
            # barycentric weight of vertex b is y / 10 and of vertex c is x / 10
            assert image.u[row, col] == pytest.approx(y / 10.0, abs=1e-6)
            assert image.v[row, col] == pytest.approx(x / 10.0, abs=1e-6)
            np.testing.assert_allclose(trace.barycentric[row, col], [1 - (x + y) / 10, y / 10, x / 10], atol=1e-12)

    def test_outside_pixels_stay_background(self):
        image, _ = rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [3], CORNER_UV, (12, 12))
        assert image.part[9, 9] == 0
        assert image.part[11, 0] == 0
        assert image.invariant_violations() == []

    def test_back_facing_triangle_is_culled(self):
        flipped = CORNER_TRIANGLE[[0, 2, 1]]
        image, _ = rasterize_mesh(flipped, [[0, 1, 2]], [3], CORNER_UV, (12, 12))
        assert image.foreground_count == 0

    @pytest.mark.parametrize("order", [(0, 1), (1, 0)])
    def test_nearer_face_wins(self, order):
        far = CORNER_TRIANGLE.copy()
        far[:, 2] = 2.0
        near = CORNER_TRIANGLE.copy()
        near[:, 2] = 1.0
        layers = [(far, 1), (near, 2)]
        layers = [layers[i] for i in order]
        screen = np.concatenate([layer for layer, _ in layers])
        parts = [part for _, part in layers]
        image, trace = rasterize_mesh(screen, [[0, 1, 2], [3, 4, 5]], parts, np.tile(CORNER_UV, (2, 1)), (12, 12))
        covered = image.foreground
        assert covered.any()
        assert np.all(image.part[covered] == 2)
        assert np.all(trace.depth[covered] == pytest.approx(1.0))

    def test_matches_brute_force_depth_test(self, rng):
        size = 24
        triangles = []
        for _ in range(6):
            triangle = random_front_triangle(rng, size, min_area=20.0)
            triangle[:, 2] = rng.uniform(1.0, 5.0, size=3)
            triangles.append(triangle)
        screen = np.concatenate(triangles)
        faces = np.arange(18).reshape(6, 3)
        _, trace = rasterize_mesh(screen, faces, np.arange(1, 7), rng.uniform(size=(18, 2)), (size, size))
        assert np.array_equal(trace.face, brute_force_faces(screen, faces, (size, size)))

    def test_is_deterministic(self, small_model):
        params = mean_params(small_model, (48, 48))
        first, _, _ = render_params(small_model, params, (48, 48))
        second, _, _ = render_params(small_model, params, (48, 48))
        assert first.identical_to(second)

    def test_body_render_uses_model_parts(self, model24):
        image, trace, _ = render_params(model24, mean_params(model24, (64, 64)), (64, 64))
        assert image.foreground_count > 0
        assert set(image.part_counts()) <= set(range(1, 25))
        assert image.invariant_violations() == []
        assert np.array_equal(trace.covered, image.foreground)

    def test_invalid_image_size(self):
        with pytest.raises(ParameterError):
            rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [1], CORNER_UV, (0, 12))


class TestRasterizeBackward:
    def test_zero_upstream_gives_zero_gradient(self):
        _, trace = rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [1], CORNER_UV, (12, 12))
        grad = rasterize_backward(trace, np.zeros((12, 12)), np.zeros((12, 12)), np.zeros((12, 12)))
        assert np.array_equal(grad, np.zeros((3, 3)))

    def test_background_pixels_carry_no_gradient(self):
        _, trace = rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [1], CORNER_UV, (12, 12))
        upstream = np.where(trace.covered, 0.0, 1.0)
        assert np.array_equal(rasterize_backward(trace, upstream, upstream), np.zeros((3, 3)))

    def test_occluded_face_gets_no_gradient(self):
        far = CORNER_TRIANGLE.copy()
        far[:, 2] = 2.0
        screen = np.concatenate([far, CORNER_TRIANGLE])
        _, trace = rasterize_mesh(screen, [[0, 1, 2], [3, 4, 5]], [1, 1], np.tile(CORNER_UV, (2, 1)), (12, 12))
        ones = np.ones((12, 12))
        grad = rasterize_backward(trace, ones, ones, ones)
        assert np.array_equal(grad[:3], np.zeros((3, 3)))
        assert np.any(grad[3:] != 0)

    def test_size_mismatch(self):
        _, trace = rasterize_mesh(CORNER_TRIANGLE, [[0, 1, 2]], [1], CORNER_UV, (12, 12))
        with pytest.raises(DimensionError):
            rasterize_backward(trace, np.zeros((12, 11)), np.zeros((12, 12)))

    def test_finite_differences(self):
        check = CHECKS["raster_interior"]
        for seed in range(10):
            assert check.run(np.random.default_rng([seed, 2])) < check.tolerance


class TestSoftMasks:
    BIG = np.array([[0.0, 0.0, 1.0], [0.0, 40.0, 1.0], [40.0, 0.0, 1.0]])

    def test_deep_inside_is_nearly_one(self):
        soft = soft_part_masks_mesh(self.BIG, [[0, 1, 2]], [1], 1, (40, 40), 1.0)
        assert soft.masks[0, 5, 5] > 0.99

    def test_far_outside_is_zero(self):
        soft = soft_part_masks_mesh(self.BIG, [[0, 1, 2]], [1], 1, (40, 40), 1.0)
        assert soft.masks[0, 39, 39] == 0.0

    def test_pixel_on_an_edge_is_one_half(self):
        # edge x = 4.5 passes through the centers of column 4
        triangle = np.array([[4.5, 0.0, 1.0], [4.5, 20.0, 1.0], [20.0, 0.0, 1.0]])
        soft = soft_part_masks_mesh(triangle, [[0, 1, 2]], [1], 1, (24, 24), 1.0)
        assert soft.masks[0, 5, 4] == pytest.approx(0.5, abs=1e-9)

    def test_masks_stay_in_unit_interval(self, small_model):
        params = mean_params(small_model, (48, 48))
        _, _, body = render_params(small_model, params, (48, 48))
        soft = soft_part_masks(body, params.camera, (48, 48), 1.5)
        assert soft.masks.shape == (12, 48, 48)
        assert np.all(soft.masks >= 0.0) and np.all(soft.masks <= 1.0)

    def test_sharp_masks_agree_with_the_hard_render(self, rng):
        size = 32
        triangles = []
        for quadrant in range(4):
            offset = np.array([16.0 * (quadrant % 2), 16.0 * (quadrant // 2)])
            while True:
                corners = offset + rng.uniform(1.0, 15.0, size=(3, 2))
                area = cross2(corners[1] - corners[0], corners[2] - corners[0])
                if abs(area) > 20.0:
                    break
            if area > 0:
                corners = corners[[0, 2, 1]]
            triangles.append(np.column_stack([corners, np.ones(3)]))
        screen = np.concatenate(triangles)
        faces = np.arange(12).reshape(4, 3)
        parts = [1, 2, 3, 4]
        image, _ = rasterize_mesh(screen, faces, parts, np.zeros((12, 2)), (size, size))
        soft = soft_part_masks_mesh(screen, faces, parts, 4, (size, size), 0.25)
        hard = np.stack([image.part == k for k in parts])
        agreement = np.mean((soft.masks >= 0.5) == hard)
        assert agreement >= 0.98

    def test_sigma_must_be_positive(self):
        with pytest.raises(ParameterError):
            soft_part_masks_mesh(self.BIG, [[0, 1, 2]], [1], 1, (40, 40), 0.0)

    def test_finite_differences(self):
        check = CHECKS["soft_masks"]
        for seed in range(5):
            assert check.run(np.random.default_rng([seed, 3])) < check.tolerance


class TestIUVFile:
    def test_roundtrip(self, small_model, tmp_path):
        image, _, _ = render_params(small_model, mean_params(small_model, (40, 30)), (40, 30))
        path = save_iuv(image, tmp_path / "frame.driu")
        loaded = load_iuv(path)
        assert loaded.identical_to(image)
        assert loaded.size == (40, 30)
        assert len(path.read_bytes()) == 16 + 40 * 30 * 9

    def test_bad_magic(self):
        data = bytearray(encode_iuv(IUVImage.background(4, 4)))
        data[:4] = b"NOPE"
        with pytest.raises(FormatError):
            decode_iuv(bytes(data))

    def test_truncated(self):
        with pytest.raises(FormatError):
            decode_iuv(encode_iuv(IUVImage.background(4, 4))[:-1])

    def test_background_with_uv_is_rejected(self):
        u = np.zeros((4, 4), dtype=np.float32)
        u[1, 1] = 0.5
        image = IUVImage(np.zeros((4, 4), dtype=np.uint8), u, np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(FormatError):
            decode_iuv(encode_iuv(image))

    def test_planes_must_agree(self):
        with pytest.raises(DimensionError):
            IUVImage(np.zeros((4, 4)), np.zeros((4, 3)), np.zeros((4, 4)))

    def test_png_preview(self, small_model, tmp_path):
        image, _, _ = render_params(small_model, mean_params(small_model, (40, 30)), (40, 30))
        path = iuv_to_png(image, tmp_path / "frame.png", small_model.part_count)
        with Image.open(path) as png:
            assert png.size == (30, 40)
            assert png.mode == "RGB"
