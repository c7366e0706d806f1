import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from radar_ess.frame_io import (
    FrameFormatError,
    FrameMeta,
    Pose,
    RadarFrame,
    binarize,
    find_frame_file,
    frame_filename,
    iter_session,
    load_frame,
    read_metadata,
    save_debug_pgm,
    save_frame,
    write_metadata,
    write_session,
)


def _meta(frame_id=0, resolution=3.25, pose=None, **kw):
    return FrameMeta(frame_id=frame_id, timestamp=0.5 * frame_id, resolution=resolution, pose=pose, **kw)


def test_zero_image_loads_as_zero_frame(tmp_path):
    path = tmp_path / "z.png"
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(path)
    frame = load_frame(path, _meta())
    assert frame.intensities.shape == (4, 4)
    assert frame.intensities.size == 16
    assert not frame.intensities.any()


def test_resolution_comes_from_metadata(tmp_path):
    path = tmp_path / "f.png"
    Image.fromarray(np.ones((8, 8), np.uint8)).save(path)
    assert load_frame(path, _meta(resolution=3.25)).resolution == 3.25


@pytest.mark.parametrize("ext", [".png", ".pgm"])
@pytest.mark.parametrize("dtype", [np.uint8, np.uint16])
def test_round_trip_is_bit_exact(tmp_path, ext, dtype):
    rng = np.random.default_rng(7)
    grid = rng.integers(0, np.iinfo(dtype).max, size=(64, 64), endpoint=True).astype(dtype)
    frame = RadarFrame(3, 1.5, 3.25, grid, Pose(1.0, 2.0))
    path = save_frame(frame, tmp_path / f"f{ext}")
    back = load_frame(path, _meta(3))
    assert back.intensities.dtype == dtype
    np.testing.assert_array_equal(back.intensities, grid)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_frame(tmp_path / "nope.png", _meta())


def test_multichannel_image_rejected(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(path)
    with pytest.raises(FrameFormatError):
        load_frame(path, _meta())


def test_dimension_mismatch_rejected(tmp_path):
    path = tmp_path / "f.png"
    Image.fromarray(np.zeros((4, 6), np.uint8)).save(path)
    with pytest.raises(FrameFormatError):
        load_frame(path, _meta(width=4, height=4))
    assert load_frame(path, _meta(width=6, height=4)).width == 6


def test_frame_invariants():
    with pytest.raises(ValueError):
        RadarFrame(0, 0.0, 0.0, np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        RadarFrame(0, 0.0, 1.0, np.zeros((0, 2), np.uint8))
    with pytest.raises(ValueError):
        RadarFrame(0, 0.0, 1.0, np.zeros((2, 2), np.float32))
    with pytest.raises(ValueError):
        Pose(float("nan"), 0.0)


def test_binarize_zero_frame():
    frame = RadarFrame(0, 0.0, 1.0, np.zeros((5, 5), np.uint8))
    assert not binarize(frame, 0).mask.any()


def test_binarize_direct_definition():
    frame = RadarFrame(0, 0.0, 1.0, np.array([[0, 10, 200]], np.uint8))
    assert binarize(frame, 50).mask.tolist() == [[False, False, True]]


def test_binarize_matches_scalar_loop():
    rng = np.random.default_rng(3)
    grid = rng.integers(0, 256, size=(32, 32)).astype(np.uint8)
    mask = binarize(RadarFrame(0, 0.0, 1.0, grid), 128).mask
    count = 0
    for row in grid.tolist():
        for v in row:
            count += v > 128
    assert int(mask.sum()) == count
    assert mask.shape == grid.shape


def test_binarize_16bit_native_depth():
    frame = RadarFrame(0, 0.0, 1.0, np.array([[300, 60000]], np.uint16))
    assert binarize(frame, 1000).mask.tolist() == [[False, True]]
    with pytest.raises(ValueError):
        binarize(RadarFrame(0, 0.0, 1.0, np.zeros((1, 1), np.uint8)), 256)


@settings(max_examples=60, deadline=None)
@given(
    grid=arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))),
    t1=st.integers(0, 255),
    t2=st.integers(0, 255),
)
def test_binarize_is_monotone(grid, t1, t2):
    lo, hi = sorted((t1, t2))
    frame = RadarFrame(0, 0.0, 1.0, grid)
    assert not (binarize(frame, hi).mask & ~binarize(frame, lo).mask).any()


def test_metadata_round_trip_with_missing_pose(tmp_path):
    metas = [_meta(0, pose=Pose(1.5, -2.0)), _meta(1, pose=None)]
    path = write_metadata(tmp_path / "metadata.csv", metas)
    assert path.read_text().splitlines()[0] == "frame_id,timestamp,x,y,resolution"
    back = read_metadata(path)
    assert back[0].pose == Pose(1.5, -2.0)
    assert back[1].pose is None
    assert [m.frame_id for m in back] == [0, 1]


def test_metadata_missing_columns(tmp_path):
    path = tmp_path / "metadata.csv"
    path.write_text("frame_id,x,y\n0,1,2\n")
    with pytest.raises(FrameFormatError):
        read_metadata(path)


def test_session_round_trip_and_stride(tmp_path):
    frames = [RadarFrame(i, float(i), 2.0, np.full((6, 5), i, np.uint8), Pose(i, 0.0)) for i in range(10)]
    write_session(tmp_path, frames)
    assert find_frame_file(tmp_path, 3).name == frame_filename(3)
    loaded = list(iter_session(tmp_path, stride=5))
    assert [f.frame_id for f in loaded] == [0, 5]
    np.testing.assert_array_equal(loaded[1].intensities, frames[5].intensities)
    assert loaded[1].pose == Pose(5.0, 0.0)


def test_debug_pgm_is_16_bit(tmp_path):
    path = save_debug_pgm(np.array([[0, 1], [2, 700]]), tmp_path / "labels.pgm")
    with Image.open(path) as im:
        arr = np.array(im)
    assert arr.tolist() == [[0, 1], [2, 700]]
