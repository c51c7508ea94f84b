import numpy as np
import pytest
from PIL import Image

from ddnet.data import (
    DataError,
    list_images,
    load_manifest_arrays,
    load_mask,
    load_pair,
    load_saliency,
    quantize,
    read_manifest,
    save_saliency,
    synth_generate,
    write_manifest,
)


def write_rgb(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="RGB").save(path)


def test_load_pair_resizes(tmp_path):
    rng = np.random.default_rng(0)
    write_rgb(tmp_path / "a.png", rng.integers(0, 256, (512, 512, 3)))
    (tmp_path / "m").mkdir()
    Image.fromarray((rng.uniform(size=(512, 512)) > 0.5).astype(np.uint8) * 255).save(tmp_path / "m" / "a.png")
    image, mask = load_pair(tmp_path / "a.png", tmp_path / "m" / "a.png", 224)
    assert image.dims == (1, 3, 224, 224) and mask.shape == (224, 224) and mask.dtype == bool
    assert 0 <= image.data.min() and image.data.max() <= 1


def test_white_mask_and_gray_image(tmp_path):
    Image.fromarray(np.full((20, 20), 255, np.uint8)).save(tmp_path / "w.png")
    assert load_mask(tmp_path / "w.png", 8).all()
    write_rgb(tmp_path / "g.png", np.full((20, 20, 3), 100))
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.zeros((20, 20), np.uint8)).save(tmp_path / "masks" / "g.png")
    image, _ = load_pair(tmp_path / "g.png", tmp_path / "masks" / "g.png", 16)
    np.testing.assert_allclose(image.data, 100 / 255, rtol=0, atol=1e-15)


def test_mask_threshold_and_first_channel(tmp_path):
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[0, 0, 0], rgb[0, 1, 0], rgb[1, 0, 1] = 128, 127, 255
    write_rgb(tmp_path / "m.png", rgb)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), [[True, False], [False, False]])


def test_pair_name_mismatch_and_decode_errors(tmp_path):
    write_rgb(tmp_path / "a.png", np.zeros((4, 4, 3)))
    write_rgb(tmp_path / "b.png", np.zeros((4, 4, 3)))
    with pytest.raises(DataError):
        load_pair(tmp_path / "a.png", tmp_path / "b.png")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        load_mask(tmp_path / "bad.png")


def test_save_examples(tmp_path):
    save_saliency(np.ones((3, 4)), tmp_path / "one.png")
    save_saliency(np.full((3, 4), 0.5), tmp_path / "half.png")
    one, half = Image.open(tmp_path / "one.png"), Image.open(tmp_path / "half.png")
    assert one.mode == "L" and np.all(np.asarray(one) == 255)
    assert np.all(np.asarray(half) == 128)


def test_save_load_round_trip(tmp_path):
    s = np.random.default_rng(1).uniform(size=(33, 17))
    save_saliency(s, tmp_path / "s.png")
    assert np.max(np.abs(load_saliency(tmp_path / "s.png") - s)) <= 1 / 510 + 1e-12


def test_quantize_and_save_errors(tmp_path):
    assert quantize(np.array([[0.5 / 255, 1.5 / 255, 2.0]])).tolist() == [[1, 2, 255]]
    with pytest.raises(ValueError):
        quantize(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        save_saliency(np.zeros((1, 2, 2)), tmp_path / "x.png")
    (tmp_path / "file").write_text("")
    with pytest.raises(DataError):
        save_saliency(np.zeros((2, 2)), tmp_path / "file" / "x.png")


def test_synth_is_deterministic(tmp_path):
    synth_generate(10, 32, 7, tmp_path / "a")
    synth_generate(10, 32, 7, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 22
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    synth_generate(10, 32, 8, tmp_path / "c")
    assert (tmp_path / "a/images/0000.png").read_bytes() != (tmp_path / "c/images/0000.png").read_bytes()


def test_synth_counts_fractions_and_split(tmp_path):
    train, test = synth_generate(25, 32, 3, tmp_path)
    assert len(list((tmp_path / "images").iterdir())) == len(list((tmp_path / "masks").iterdir())) == 25
    assert (len(train), len(test)) == (20, 5)
    for _, mask in list(train.paths()) + list(test.paths()):
        assert 0.02 <= load_mask(mask).mean() <= 0.5
    assert read_manifest(tmp_path / "train.txt").pairs == train.pairs
    assert read_manifest(tmp_path / "test.txt").split == "test"


def test_synth_argument_errors(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(0, 32, 0, tmp_path)
    with pytest.raises(ValueError):
        synth_generate(2, 30, 0, tmp_path)


def test_manifest_comments_order_and_errors(tmp_path):
    synth_generate(4, 16, 0, tmp_path)
    pairs = [("images/0002.png", "masks/0002.png"), ("images/0000.png", "masks/0000.png")]
    write_manifest(tmp_path / "m.txt", pairs, "hand written")
    raw = (tmp_path / "m.txt").read_bytes()
    assert raw.startswith(b"# hand written\n") and b"\r" not in raw
    manifest = read_manifest(tmp_path / "m.txt")
    assert manifest.pairs == pairs
    images, masks = load_manifest_arrays(manifest, workers=2)
    assert images.shape == (2, 3, 16, 16) and masks.shape == (2, 16, 16)
    serial, _ = load_manifest_arrays(manifest)
    np.testing.assert_array_equal(images, serial)
    (tmp_path / "bad.txt").write_text("images/0000.png masks/0000.png\n")
    with pytest.raises(DataError, match=":1:"):
        read_manifest(tmp_path / "bad.txt")
    (tmp_path / "gone.txt").write_text("images/9.png\tmasks/9.png\n")
    with pytest.raises(DataError, match="missing"):
        read_manifest(tmp_path / "gone.txt")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "absent.txt")


def test_list_images(tmp_path):
    write_rgb(tmp_path / "b.png", np.zeros((2, 2, 3)))
    write_rgb(tmp_path / "a.jpg", np.zeros((2, 2, 3)))
    (tmp_path / "notes.txt").write_text("x")
    assert list(list_images(tmp_path)) == ["a", "b"]
    write_rgb(tmp_path / "a.png", np.zeros((2, 2, 3)))
    with pytest.raises(DataError, match="duplicate"):
        list_images(tmp_path)
    with pytest.raises(DataError):
        list_images(tmp_path / "nope")
