import json
from collections import Counter

import numpy as np
import pytest

from transfusion.data import (COLORS, SHAPES, ToyDatasetSpec, caption_for, class_pairs, classify_image,
                              dataset_hash, gen_toy_dataset, load_toy_dataset, make_examples,
                              parse_caption, render)


def test_caption_roundtrip():
    assert len(class_pairs()) == 16
    for color, shape in class_pairs():
        assert parse_caption(caption_for(color, shape)) == (color, shape)
    assert caption_for("red", "square") == "a red square"
    with pytest.raises(ValueError):
        parse_caption("a purple square")


def test_balanced_and_deterministic(tmp_path):
    spec = ToyDatasetSpec(num_train=64, num_val=32, seed=3)
    a = gen_toy_dataset(spec, tmp_path / "a")
    b = gen_toy_dataset(spec, tmp_path / "b")
    rows = [json.loads(line) for line in (a / "manifest.jsonl").read_text().splitlines()]
    assert len(rows) == 96
    train = Counter((r["color"], r["shape"]) for r in rows if r["split"] == "train")
    assert set(train.values()) == {4} and len(train) == 16
    assert dataset_hash(a) == dataset_hash(b)
    for r in rows:
        assert (a / r["image_path"]).read_bytes() == (b / r["image_path"]).read_bytes()
    other = gen_toy_dataset(ToyDatasetSpec(num_train=64, num_val=32, seed=4), tmp_path / "c")
    assert dataset_hash(other) != dataset_hash(a)


def test_loaded_pngs_match_renders(tmp_path):
    spec = ToyDatasetSpec(num_train=16, num_val=16, seed=0)
    gen_toy_dataset(spec, tmp_path)
    loaded = load_toy_dataset(tmp_path, "train")
    made = [e for e in make_examples(spec) if e.split == "train"]
    assert [e.caption for e in loaded] == [e.caption for e in made]
    for x, y in zip(loaded, made):
        np.testing.assert_array_equal(x.pixels, y.pixels)
    with pytest.raises(FileNotFoundError):
        load_toy_dataset(tmp_path / "missing")


def test_classifier_closure_on_clean_renders():
    for e in make_examples(ToyDatasetSpec()):
        assert classify_image(e.pixels).matches(e.color, e.shape), e.caption


def test_classifier_rejects_noise():
    rng = np.random.default_rng(0)
    hits = sum(classify_image(rng.random((16, 16, 3))).recognized for _ in range(100))
    assert hits <= 1


def test_color_inverted_square():
    # invert the colour of the shape, keep the black background
    for color, inverted in (("blue", "yellow"), ("red", None)):
        px = render(color, "square", (3, 4))
        fg = px.max(-1) > 0
        px[fg] = 1.0 - px[fg]
        got = classify_image(px)
        assert got.shape == "square" and got.color == inverted


def test_black_image_unrecognized():
    assert not classify_image(np.zeros((16, 16, 3))).recognized


def test_render_geometry():
    px = render("green", "cross", (1, 1))
    assert px.shape == (16, 16, 3)
    assert set(np.unique(px)) == {0.0, 1.0}
    assert np.all(px[0] == 0) and np.all(px[:, 0] == 0)
    assert len(COLORS) == 4 and len(SHAPES) == 4


def test_forced_choice_always_labels_foreground():
    rng = np.random.default_rng(1)
    noisy = rng.random((16, 16, 3))
    got = classify_image(noisy, forced=True)
    assert got.color in COLORS and got.shape in SHAPES
    assert classify_image(np.zeros((16, 16, 3)), forced=True).color is None
    clean = render("yellow", "circle", (2, 5))
    assert classify_image(clean, forced=True) == classify_image(clean)
