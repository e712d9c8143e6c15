import numpy as np

# capskit is imported here only to cross-validate the shared binary formats
import capskit.io as engine_io
from capskit.fxp import FxFormat, FxTensor

from refkit.data import synthetic_images, write_synthetic_dataset
from refkit.formats import (
    read_container,
    read_idx_images,
    read_idx_labels,
    read_mask,
    write_container,
    write_idx_images,
    write_idx_labels,
)


def test_container_roundtrip_self(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "b": (rng.integers(-100, 100, (2, 5), dtype=np.int16), 9),
    }
    p = tmp_path / "w.fc"
    write_container(p, tensors)
    back = read_container(p)
    assert np.array_equal(back["a"], tensors["a"])
    raw, frac = back["b"]
    assert frac == 9 and np.array_equal(raw, tensors["b"][0])


def test_container_cross_reads_in_engine(tmp_path):
    rng = np.random.default_rng(1)
    p = tmp_path / "w.fc"
    write_container(
        p,
        {
            "conv1.weight": rng.normal(size=(4, 1, 3, 3)).astype(np.float32),
            "fx": (rng.integers(-50, 50, (2, 2), dtype=np.int16), 7),
        },
    )
    loaded = engine_io.load_weights(p)
    assert list(loaded) == ["conv1.weight", "fx"]
    assert loaded["fx"].fmt.frac_bits == 7
    # engine re-save must be byte-identical: same format, both sides
    engine_io.save_weights(tmp_path / "w2.fc", loaded)
    assert (tmp_path / "w2.fc").read_bytes() == p.read_bytes()


def test_container_cross_reads_from_engine(tmp_path):
    rng = np.random.default_rng(2)
    p = tmp_path / "w.fc"
    engine_io.save_weights(
        p,
        {
            "x": rng.normal(size=(2, 3)).astype(np.float32),
            "q": FxTensor(rng.integers(-5, 5, (4,), dtype=np.int16), FxFormat(5)),
        },
    )
    back = read_container(p)
    assert np.array_equal(back["x"], engine_io.load_weights(p)["x"])
    assert back["q"][1] == 5


def test_mask_cross_reads_from_engine(tmp_path):
    rng = np.random.default_rng(3)
    bits = rng.random(100) > 0.5
    p = tmp_path / "m.fm"
    engine_io.save_mask(p, [engine_io.MaskEntry("conv1", "kernel", bits)])
    layers = read_mask(p)
    assert layers[0].name == "conv1"
    assert np.array_equal(layers[0].bits, bits)


def test_idx_roundtrip_and_cross(tmp_path):
    imgs, labels = synthetic_images(8, 0)
    write_idx_images(tmp_path / "im.idx", imgs)
    write_idx_labels(tmp_path / "lb.idx", labels)
    back = read_idx_images(tmp_path / "im.idx")
    assert back.shape == (8, 28, 28)
    assert np.array_equal(read_idx_labels(tmp_path / "lb.idx"), labels)
    # engine reads the same files
    assert np.allclose(engine_io.load_idx(tmp_path / "im.idx", expect="images"), back)
    assert np.array_equal(engine_io.load_idx(tmp_path / "lb.idx", expect="labels"), labels)


def test_synthetic_dataset_layout(tmp_path):
    paths = write_synthetic_dataset(tmp_path / "data", 32, 16, seed=7)
    data_imgs = read_idx_images(paths["train_images"])
    assert data_imgs.shape == (32, 28, 28)
    assert read_idx_labels(paths["test_labels"]).shape == (16,)
    # deterministic for a given seed
    again = write_synthetic_dataset(tmp_path / "data2", 32, 16, seed=7)
    assert (paths["train_images"].read_bytes() == again["train_images"].read_bytes())
