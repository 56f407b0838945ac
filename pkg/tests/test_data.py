import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crdnet.data import (
    FormatError,
    PointAnnotation,
    SynthConfig,
    build_target_pyramid,
    downsample_density,
    export_png,
    gaussian_kernel_1d,
    generate_density_map,
    generate_scene,
    load_annotation,
    read_density,
    read_image,
    target_residual,
    write_annotation,
    write_density,
    write_image,
)

from oracles import interp_pixel


def test_empty_annotation_gives_zero_map():
    m = generate_density_map(PointAnnotation(16, 12, []), 4.0)
    assert m.shape == (12, 16)
    assert not m.any()


def test_centre_point_sums_to_one():
    m = generate_density_map(PointAnnotation(64, 64, [(32.0, 32.0)]), 4.0)
    assert abs(m.sum() - 1.0) < 1e-6
    assert m.argmax() == 32 * 64 + 32


def test_corner_point_renormalized():
    m = generate_density_map(PointAnnotation(64, 64, [(0.0, 0.0)]), 4.0)
    # oracle: the untruncated-by-image kernel quadrant, summed and divided by its own sum
    g = np.exp(-0.5 * (np.arange(0, 17) / 4.0) ** 2)
    quadrant = np.outer(g, g)
    np.testing.assert_allclose(m[:17, :17], quadrant / quadrant.sum(), rtol=1e-12)
    assert abs(m.sum() - 1.0) < 1e-6
    assert not m[17:].any() and not m[:, 17:].any()


def test_density_rejects_bad_input():
    with pytest.raises(ValueError):
        generate_density_map(PointAnnotation(8, 8, [(1.0, 1.0)]), 0.0)
    with pytest.raises(ValueError):
        PointAnnotation(8, 8, [(8.0, 0.0)])
    with pytest.raises(ValueError):
        PointAnnotation(8, 8, [(0.0, -0.1)])


def test_kernel_truncates_at_four_sigma():
    assert len(gaussian_kernel_1d(4.0)) == 33
    assert len(gaussian_kernel_1d(1.5)) == 13


@settings(max_examples=60, deadline=None)
@given(
    w=st.integers(1, 48),
    h=st.integers(1, 48),
    sigma=st.floats(0.5, 6.0),
    data=st.data(),
)
def test_count_preservation(w, h, sigma, data):
    n = data.draw(st.integers(0, 25))
    xs = data.draw(st.lists(st.floats(0, w, exclude_max=True), min_size=n, max_size=n))
    ys = data.draw(st.lists(st.floats(0, h, exclude_max=True), min_size=n, max_size=n))
    m = generate_density_map(PointAnnotation(w, h, list(zip(xs, ys))), sigma)
    assert abs(m.sum() - n) < 1e-3
    assert (m >= 0).all()


def test_downsample_examples(rng):
    np.testing.assert_array_equal(downsample_density(np.ones((4, 4)), 2), np.full((2, 2), 4.0))
    m = np.zeros((8, 8))
    m[0, 0] = 1.0
    want = np.zeros((4, 4))
    want[0, 0] = 1.0
    np.testing.assert_array_equal(downsample_density(m, 2), want)
    r = rng.random((6, 6))
    direct = sum(r[i, j] for i in range(6) for j in range(6))
    assert abs(downsample_density(r, 2).sum() - direct) < 1e-9
    with pytest.raises(ValueError):
        downsample_density(np.ones((6, 6)), 4)


def test_target_pyramid(rng):
    gt = rng.random((32, 32))
    (only,) = build_target_pyramid(gt, 1)
    np.testing.assert_array_equal(only, gt)
    assert all(not lvl.any() for lvl in build_target_pyramid(np.zeros((16, 16)), 3))
    levels = build_target_pyramid(gt, 4)
    assert [lvl.shape for lvl in levels] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    total = sum(gt[i, j] for i in range(32) for j in range(32))
    for lvl in levels:
        assert abs(lvl.sum() - total) < 1e-9
    with pytest.raises(ValueError):
        build_target_pyramid(np.ones((12, 12)), 4)


def test_target_residual(rng):
    h = rng.random((8, 8))
    np.testing.assert_array_equal(target_residual(h, np.zeros((4, 4))), h)
    prev = rng.random((4, 4))
    up = np.array([[interp_pixel(prev, 2, i, j) for j in range(8)] for i in range(8)])
    np.testing.assert_allclose(target_residual(up, prev), 0.0, atol=1e-15)
    np.testing.assert_allclose(target_residual(h, prev), h - up, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        target_residual(h, np.zeros((3, 3)))


def test_scene_determinism_and_counts():
    cfg = SynthConfig(seed=3)
    a_img, a_ann = generate_scene(cfg, 11)
    b_img, b_ann = generate_scene(cfg, 11)
    assert a_img.tobytes() == b_img.tobytes()
    assert a_ann == b_ann
    c_img, _ = generate_scene(cfg, 12)
    assert c_img.tobytes() != a_img.tobytes()


def test_scene_empty_range():
    img, ann = generate_scene(SynthConfig(count_min=0, count_max=0, noise=0.05), 0)
    assert ann.points == []
    assert img.std() > 0  # noise only


def test_scene_counts_stay_in_range():
    cfg = SynthConfig(image_size=16, count_min=1, count_max=30)
    counts = [generate_scene(cfg, s)[1].count for s in range(1000)]
    assert min(counts) >= 1 and max(counts) <= 30
    assert len(set(counts)) == 30


def test_scene_blobs_grow_downwards():
    cfg = SynthConfig(image_size=64, count_min=1, count_max=1, noise=0.0, background=0.0, radius_top=1.0, radius_bottom=5.0)
    widths = []
    for s in range(40):
        img, ann = generate_scene(cfg, s)
        widths.append((ann.points[0][1], (img > 0.5 * img.max()).sum()))
    widths.sort()
    top = np.mean([w for _, w in widths[:10]])
    bottom = np.mean([w for _, w in widths[-10:]])
    assert bottom > 2 * top


def test_density_round_trip(tmp_path, rng):
    m = rng.random((7, 5)).astype(np.float32)
    write_density(tmp_path / "m.crd", m)
    back = read_density(tmp_path / "m.crd")
    assert back.dtype == np.float32 and back.tobytes() == m.tobytes()
    raw = (tmp_path / "m.crd").read_bytes()
    assert raw[:4] == b"CRD1"
    assert int.from_bytes(raw[4:8], "little") == 7 and int.from_bytes(raw[8:12], "little") == 5


def test_density_read_errors(tmp_path):
    m = np.ones((4, 4), dtype=np.float32)
    write_density(tmp_path / "m.crd", m)
    raw = (tmp_path / "m.crd").read_bytes()
    (tmp_path / "short.crd").write_bytes(raw[:-3])
    (tmp_path / "hdr.crd").write_bytes(raw[:6])
    (tmp_path / "magic.crd").write_bytes(b"XXXX" + raw[4:])
    for name in ("short", "hdr", "magic"):
        with pytest.raises(FormatError):
            read_density(tmp_path / f"{name}.crd")


def test_annotation_round_trip(tmp_path):
    ann = PointAnnotation(20, 10, [(0.0, 0.0), (19.5, 9.25), (3.125, 4.0)])
    write_annotation(tmp_path / "a.json", ann)
    assert load_annotation(tmp_path / "a.json") == ann
    text = (tmp_path / "a.json").read_text()
    write_annotation(tmp_path / "b.json", load_annotation(tmp_path / "a.json"))
    assert (tmp_path / "b.json").read_text() == text


@pytest.mark.parametrize(
    "text",
    [
        '{"width": 4, "height": 4, "points": [[4, 0]]}',
        '{"width": 4, "height": 4, "points": [[1, 2, 3]]}',
        '{"width": 4, "points": []}',
        '{"width": 4, "height": 4, "points": [[1, 2]',
        '{"width": "4", "height": 4, "points": []}',
    ],
)
def test_annotation_errors(tmp_path, text):
    (tmp_path / "bad.json").write_text(text)
    with pytest.raises(FormatError):
        load_annotation(tmp_path / "bad.json")


def test_png_export(tmp_path, rng):
    m = rng.random((6, 9))
    export_png(tmp_path / "m.png", m)
    img = read_image(tmp_path / "m.png")
    assert img.shape == (6, 9)
    assert img.max() == 1.0
    export_png(tmp_path / "z.png", np.zeros((3, 3)))
    assert read_image(tmp_path / "z.png").max() == 0.0


def test_image_png_round_trip_is_quantized(tmp_path):
    img, _ = generate_scene(SynthConfig(image_size=16), 0)
    write_image(tmp_path / "i.png", img)
    assert np.abs(read_image(tmp_path / "i.png") - img).max() <= 0.5 / 255 + 1e-12
