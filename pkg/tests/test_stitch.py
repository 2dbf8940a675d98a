import numpy as np
import pytest

from ctxinpaint.core import ImageCanvas, MaskGrid, ShapeError, TaskKind, ValueRangeError
from ctxinpaint.pose import RelativePose
from ctxinpaint.stitch import (
    FRAME_COLOR,
    FRAME_WIDTH,
    NVS_BACKGROUND,
    PatchBox,
    StitchedCanvas,
    TrainingSample,
    compose_local_sr,
    compose_nvs,
    compose_plain,
    compose_ref_inpaint,
    draw_frame,
)


def _img(seed=0, h=32, w=32):
    rng = np.random.default_rng(seed)
    return ImageCanvas(rng.uniform(0, 1, (h, w, 3)).astype(np.float32))


def _mask(h=32, w=32):
    m = np.zeros((h, w), dtype=np.uint8)
    m[8:20, 10:22] = 1
    return MaskGrid(m)


def test_compose_ref_inpaint_layout():
    ref, tar, m = _img(1), _img(2), _mask()
    st = compose_ref_inpaint(ref, tar, m)
    assert st.task is TaskKind.REF_INPAINT
    assert st.canvas.width == 64 and st.pane_width == 32
    # left pane untouched, right pane zeroed under mask
    assert np.array_equal(st.canvas.values[:, :32], ref.values)
    sel = m.values.astype(bool)
    assert (st.canvas.values[:, 32:][sel] == 0).all()
    assert np.array_equal(st.canvas.values[:, 32:][~sel], tar.values[~sel])
    # mask covers only the target pane
    assert not st.mask.values[:, :32].any()
    assert np.array_equal(st.mask.values[:, 32:], m.values)


def test_compose_ref_inpaint_shape_errors():
    with pytest.raises(ShapeError):
        compose_ref_inpaint(_img(1), _img(2, h=16), _mask(16, 32))
    with pytest.raises(ShapeError):
        compose_ref_inpaint(_img(1), _img(2), _mask(16, 16))


def test_stitched_canvas_invariants():
    ref, tar = _img(1), _img(2)
    canvas = ImageCanvas(np.concatenate([ref.values, tar.values], axis=1))
    bad = np.zeros((32, 64), dtype=np.uint8)
    bad[0, 0] = 1  # masks the reference pane
    with pytest.raises(ValueRangeError):
        StitchedCanvas(canvas, MaskGrid(bad), TaskKind.REF_INPAINT)
    with pytest.raises(ValueRangeError):
        StitchedCanvas(canvas, MaskGrid(np.zeros((32, 64), dtype=np.uint8)),
                       TaskKind.REF_INPAINT)  # empty mask
    with pytest.raises(ShapeError):
        StitchedCanvas(canvas, _mask(), TaskKind.REF_INPAINT)


def test_compose_plain():
    img, m = _img(3), _mask()
    st = compose_plain(img, m, TaskKind.INPAINT)
    assert st.pane_width == 32
    sel = m.values.astype(bool)
    assert (st.canvas.values[sel] == 0).all()
    assert np.array_equal(st.canvas.values[~sel], img.values[~sel])
    with pytest.raises(ValueError):
        compose_plain(img, m, TaskKind.REF_INPAINT)


def test_draw_frame():
    img = _img(4)
    box = PatchBox(4, 6, 20, 16)
    framed = draw_frame(img, box)
    col = np.asarray(FRAME_COLOR, dtype=np.float32)
    assert np.array_equal(framed.values[6, 4], col)
    assert np.array_equal(framed.values[6 + 16 - 1, 4 + 20 - 1], col)
    # interior beyond the frame width untouched
    inner = framed.values[6 + FRAME_WIDTH:6 + 16 - FRAME_WIDTH,
                          4 + FRAME_WIDTH:4 + 20 - FRAME_WIDTH]
    orig = img.values[6 + FRAME_WIDTH:6 + 16 - FRAME_WIDTH,
                      4 + FRAME_WIDTH:4 + 20 - FRAME_WIDTH]
    assert np.array_equal(inner, orig)
    # exterior untouched
    assert np.array_equal(framed.values[:6], img.values[:6])
    with pytest.raises(ValueRangeError):
        draw_frame(img, PatchBox(0, 0, 7, 7), width=4)


def test_compose_local_sr():
    img = _img(5)
    box = PatchBox(8, 8, 16, 16)
    st = compose_local_sr(img, box)
    assert st.task is TaskKind.LOCAL_SR
    # whole target pane flagged for generation
    assert st.mask.values[:, 32:].all()
    assert not st.mask.values[:, :32].any()
    # left pane is the framed reference
    assert np.array_equal(
        st.canvas.values[:, :32], draw_frame(img, box).values
    )
    assert st.meta["box"] == box
    with pytest.raises(ValueRangeError):
        compose_local_sr(img, PatchBox(20, 20, 16, 16))  # out of bounds
    with pytest.raises(ValueRangeError):
        compose_local_sr(img, PatchBox(0, 0, 16, 4))  # aspect mismatch


def test_compose_nvs():
    ref, m = _img(6), _mask()
    pose = RelativePose(0.1, 0.2, 0.3)
    st = compose_nvs(ref, m, pose)
    assert st.task is TaskKind.NVS
    assert st.meta["pose"] == pose
    right = st.canvas.values[:, 32:]
    sel = m.values.astype(bool)
    assert (right[sel] == 0).all()
    assert (right[~sel] == NVS_BACKGROUND).all()
    with pytest.raises(ValueRangeError):
        compose_nvs(ref, MaskGrid(np.zeros((32, 32), dtype=np.uint8)), pose)
    with pytest.raises(ShapeError):
        compose_nvs(ref, _mask(16, 16), pose)


def test_training_sample_shape_check():
    ref, tar, m = _img(1), _img(2), _mask()
    st = compose_ref_inpaint(ref, tar, m)
    with pytest.raises(ShapeError):
        TrainingSample(st, ref)  # clean must match stitched shape


def test_patchbox_validation():
    with pytest.raises(ValueRangeError):
        PatchBox(0, 0, 0, 5)
