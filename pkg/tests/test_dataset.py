import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from matplotlib.path import Path as MplPath

from oobtrigger.dataset import (
    Annotation, BoundingBox, Dataset, IngestionError, Sample, ValidationError, coco_to_annotations,
    generate_synthetic_dataset, load_dataset, make_masked_image, save_dataset, split_batches, write_png,
)


def _write_fixture(tmp_path, n):
    rng = np.random.default_rng(0)
    images = {}
    for i in range(n):
        name = f"img_{i}.png"
        arr = rng.integers(0, 256, size=(20, 24, 3)).astype(np.float32) / 255
        write_png(tmp_path / name, arr)
        images[name] = [{"box": [1 + i, 2, 10 + i, 12], "class_id": i % 2}]
    doc = {"class_names": ["a", "b"], "images": images}
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps(doc))
    return ann, list(images)


def test_load_empty(tmp_path):
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps({"class_names": ["a"], "images": {}}))
    assert len(load_dataset(tmp_path, ann)) == 0


def test_load_preserves_file_order(tmp_path):
    ann, names = _write_fixture(tmp_path, 3)
    ds = load_dataset(tmp_path, ann)
    assert [s.id for s in ds] == names
    assert ds[1].annotations[0].box.as_list() == [2, 2, 11, 12]
    assert ds[2].annotations[0].class_id == 0
    assert ds[0].image.shape == (20, 24, 3)
    assert 0 <= ds[0].image.min() and ds[0].image.max() <= 1


def test_load_rejects_degenerate_box(tmp_path):
    ann, names = _write_fixture(tmp_path, 1)
    doc = json.loads(ann.read_text())
    doc["images"][names[0]][0]["box"] = [5, 2, 5, 12]
    ann.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match=names[0]):
        load_dataset(tmp_path, ann)


def test_load_missing_image_names_id(tmp_path):
    ann, names = _write_fixture(tmp_path, 2)
    (tmp_path / names[1]).unlink()
    with pytest.raises(IngestionError, match=names[1]):
        load_dataset(tmp_path, ann)


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic_dataset(5, (32, 48), 3)
    ann = save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, ann)
    assert [s.id for s in back] == [s.id for s in ds]
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.annotations == b.annotations


def test_synthetic_empty():
    ds = generate_synthetic_dataset(0, (64, 64), 7)
    assert len(ds) == 0


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(100, (64, 64), 7)
    b = generate_synthetic_dataset(100, (64, 64), 7)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.annotations == y.annotations
    c = generate_synthetic_dataset(3, (64, 64), 8)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_synthetic_rejects_small_images():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, (16, 64), 0)


def _octagon_raster(box, size):
    """Pixel-centre raster of a regular octagon with flat top/bottom filling ``box``."""
    cx, cy = box.center
    apothem = box.width / 2
    r = apothem / math.cos(math.radians(22.5))
    verts = [(cx + r * math.cos(math.radians(22.5 + 45 * k)), cy + r * math.sin(math.radians(22.5 + 45 * k)))
             for k in range(8)]
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    inside = MplPath(verts).contains_points(np.stack([xs.ravel(), ys.ravel()], 1), radius=-1e-9)
    return inside.reshape(h, w)


def test_synthetic_boxes_contain_octagon():
    ds = generate_synthetic_dataset(100, (64, 64), 7)
    for s in ds:
        box = s.boxes_of(0)[0]
        mask = _octagon_raster(box, s.size)
        assert mask.sum() > 0
        rows, cols = box.pixel_slices(s.size)
        inside = np.zeros_like(mask)
        inside[rows, cols] = True
        assert (mask & inside).sum() >= 0.9 * mask.sum()
        # the painted sign really is there: most octagon pixels are red or white rim
        img = s.image[mask]
        signlike = (img[:, 0] > 0.6) & ((img[:, 1] < 0.25) | (img[:, 1] > 0.8))
        assert signlike.mean() > 0.9


def test_synthetic_vocabulary_and_distractors():
    ds = generate_synthetic_dataset(50, (64, 64), 1)
    assert ds.class_names == ("stop_sign", "circle", "triangle", "square")
    assert all(len(s.boxes_of(0)) == 1 for s in ds)
    assert any(len(s.annotations) > 1 for s in ds)
    for s in ds:
        for a in s.annotations:
            assert a.box.inside(s.size)


def _sample(image, boxes, cls=0):
    return Sample("x", image, tuple(Annotation(BoundingBox(*b), cls) for b in boxes))


def test_masked_full_cover():
    s = _sample(np.ones((8, 8, 3), np.float32), [(0, 0, 8, 8)])
    np.testing.assert_array_equal(make_masked_image(s, 0, 0.5), np.full((8, 8, 3), 0.5, np.float32))


def test_masked_locality_and_count():
    ds = generate_synthetic_dataset(10, (64, 64), 2)
    for s in ds:
        box = s.boxes_of(0)[0]
        out = make_masked_image(s, 0, 0.5)
        rows, cols = box.pixel_slices(s.size)
        outside = np.ones(s.size, bool)
        outside[rows, cols] = False
        np.testing.assert_array_equal(out[outside], s.image[outside])
        area = (rows.stop - rows.start) * (cols.stop - cols.start)
        changed = 0
        for r in range(s.size[0]):
            for c in range(s.size[1]):
                for ch in range(3):
                    changed += out[r, c, ch] != s.image[r, c, ch]
        assert changed == area * 3


def test_masked_requires_target():
    s = _sample(np.zeros((8, 8, 3), np.float32), [(0, 0, 4, 4)], cls=1)
    with pytest.raises(ValueError):
        make_masked_image(s, 0)


@settings(max_examples=30, deadline=None)
@given(x0=st.floats(0, 20), y0=st.floats(0, 20), w=st.floats(0.5, 11), h=st.floats(0.5, 11),
       gray=st.floats(0, 1))
def test_masked_idempotent(x0, y0, w, h, gray):
    img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    s = _sample(img, [(x0, y0, x0 + w, y0 + h)])
    once = make_masked_image(s, 0, gray)
    twice = make_masked_image(Sample("x", once, s.annotations), 0, gray)
    np.testing.assert_array_equal(once, twice)


def _dataset(n):
    img = np.zeros((4, 4, 3), np.float32)
    return Dataset(tuple(Sample(f"s{i}", img) for i in range(n)), ("a",), 0)


@pytest.mark.parametrize("n,bs,sizes", [(10, 10, [10]), (10, 4, [4, 4, 2]), (3, 5, [3])])
def test_split_sizes(n, bs, sizes):
    assert [len(b) for b in split_batches(_dataset(n), bs, 0)] == sizes


def test_split_deterministic_and_fresh_per_epoch():
    ds = _dataset(30)
    ids = lambda bs: [s.id for b in bs for s in b]
    assert ids(split_batches(ds, 4, 5)) == ids(split_batches(ds, 4, 5))
    assert ids(split_batches(ds, 4, 5, epoch=1)) != ids(split_batches(ds, 4, 5, epoch=0))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), bs=st.integers(1, 50), seed=st.integers(0, 10**6), epoch=st.integers(0, 100))
def test_split_is_partition(n, bs, seed, epoch):
    ds = _dataset(n)
    batches = split_batches(ds, bs, seed, epoch)
    assert len(batches) == math.ceil(n / bs)
    assert sorted(s.id for b in batches for s in b) == sorted(s.id for s in ds)


def test_split_errors():
    with pytest.raises(ValueError):
        split_batches(_dataset(3), 0, 0)
    with pytest.raises(ValueError):
        split_batches(_dataset(0), 2, 0)


def test_dataset_invariants():
    img = np.zeros((4, 4, 3), np.float32)
    with pytest.raises(ValidationError):
        Dataset((Sample("a", img), Sample("a", img)), ("x",), 0)
    with pytest.raises(ValidationError):
        Dataset((), ("x",), 3)


def test_coco_converter():
    coco = {
        "images": [{"id": i, "file_name": f"{i}.jpg"} for i in range(10)],
        "categories": [{"id": 13, "name": "stop sign"}, {"id": 1, "name": "person"}, {"id": 3, "name": "car"}],
        "annotations": [{"image_id": i, "category_id": 13, "bbox": [1, 2, 3, 4]} for i in range(8)]
        + [{"image_id": 9, "category_id": 1, "bbox": [0, 0, 5, 5]},
           {"image_id": 0, "category_id": 3, "bbox": [0, 0, 5, 5]}],
    }
    train, test = coco_to_annotations(coco, ["stop sign", "person"], "stop sign", test_fraction=0.3, seed=1)
    assert train["class_names"] == ["stop sign", "person"]
    assert len(train["images"]) + len(test["images"]) == 9
    assert len(test["images"]) == 3
    assert train.keys() == test.keys()
    assert not set(train["images"]) & set(test["images"])
    anns = {**train["images"], **test["images"]}
    assert anns["0.jpg"] == [{"box": [1, 2, 4, 6], "class_id": 0}]
