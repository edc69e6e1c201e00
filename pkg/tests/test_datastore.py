import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tap.datastore import (
    EmbeddingNotFound,
    EmbeddingStore,
    EmbeddingStoreWriter,
    ShapesConfig,
    StoreCorruption,
    crop_and_mask,
    generate_shapes_dataset,
    load_dataset,
    precompute_embeddings,
    read_shard_index,
    rle_decode,
    rle_encode,
    save_dataset,
)
from tap.teacher import SyntheticTeacher
from tap.vocab import ConceptVocabulary, build_concept_weights


# -- shapes-world generator ---------------------------------------------------


def test_generator_deterministic():
    cfg = ShapesConfig(n_images=5, image_size=96, seed=9)
    a = generate_shapes_dataset(cfg)
    b = generate_shapes_dataset(cfg)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.image, rb.image)
        assert [r.caption for r in ra.regions] == [r.caption for r in rb.regions]
        for x, y in zip(ra.regions, rb.regions):
            assert np.array_equal(x.mask, y.mask)


def test_generator_contracts(tiny_dataset):
    for rec in tiny_dataset.records:
        assert 1 <= len(rec.regions) <= 6
        occupied = np.zeros(rec.image.shape[:2], dtype=bool)
        for region in rec.regions:
            assert region.mask.sum() >= 64
            assert region.concept in tiny_dataset.concepts
            assert not (region.mask & occupied).any()  # regions never overlap
            occupied |= region.mask
            # masks stay inside the frame with a margin
            assert not region.mask[0].any() and not region.mask[-1].any()
            assert not region.mask[:, 0].any() and not region.mask[:, -1].any()
            assert region.caption.startswith(f"a {region.concept} in the ")


def test_generator_infeasible_config():
    with pytest.raises(ValueError):
        generate_shapes_dataset(ShapesConfig(n_images=1, k=13))
    with pytest.raises(ValueError):
        generate_shapes_dataset(ShapesConfig(n_images=1, image_size=16))


def test_dataset_save_load_roundtrip(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path / "d")
    loaded = load_dataset(tmp_path / "d")
    assert loaded.concepts == tiny_dataset.concepts
    for ra, rb in zip(tiny_dataset.records, loaded.records):
        assert np.array_equal(ra.image, rb.image)
        for x, y in zip(ra.regions, rb.regions):
            assert np.array_equal(x.mask, y.mask)
            assert x.caption == y.caption


def test_dataset_bytes_identical_across_saves(tmp_path):
    cfg = ShapesConfig(n_images=3, image_size=64, seed=4, max_half=14)
    save_dataset(generate_shapes_dataset(cfg), tmp_path / "a")
    save_dataset(generate_shapes_dataset(cfg), tmp_path / "b")
    ma = (tmp_path / "a" / "manifest.json").read_bytes()
    mb = (tmp_path / "b" / "manifest.json").read_bytes()
    assert ma == mb
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        q = tmp_path / "b" / "images" / p.name
        assert p.read_bytes() == q.read_bytes()


# -- crops ---------------------------------------------------------------------


def test_crop_whole_image_equals_resized():
    image = np.random.default_rng(0).integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
    mask = np.ones((32, 32), dtype=bool)
    crop = crop_and_mask(image, mask, 16)
    src = np.floor((np.arange(16) + 0.5) * 32 / 16).astype(int)
    assert np.array_equal(crop, image[src][:, src])


def test_crop_single_pixel_centered():
    image = np.zeros((20, 20, 3), dtype=np.uint8)
    image[7, 13] = (9, 8, 7)
    mask = np.zeros((20, 20), dtype=bool)
    mask[7, 13] = True
    crop = crop_and_mask(image, mask, 9)
    assert tuple(crop[4, 4]) == (9, 8, 7)
    crop[4, 4] = 0
    assert not crop.any()


def test_crop_nonzero_pixels_inside_mapped_mask():
    # oracle: push the mask through the same bbox/pad/resize transform and
    # require every nonzero crop pixel to land inside it
    image = np.full((40, 40, 3), 200, dtype=np.uint8)
    mask = np.zeros((40, 40), dtype=bool)
    mask[4:14, 20:36] = True  # off-center rectangle
    crop = crop_and_mask(image, mask, 12)
    mask3 = np.repeat(mask[:, :, None], 3, axis=2).astype(np.uint8)
    mapped = crop_and_mask(mask3, mask, 12).astype(bool).any(axis=2)
    assert not crop[~mapped].any()
    assert crop[mapped].all()


def test_crop_empty_mask_error():
    with pytest.raises(ValueError):
        crop_and_mask(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), bool), 4)


# -- RLE -------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**20 - 1), st.integers(1, 5), st.integers(1, 5))
def test_rle_roundtrip(bits, h, w):
    mask = np.array([(bits >> i) & 1 for i in range(h * w)], dtype=bool).reshape(h, w)
    assert np.array_equal(rle_decode(rle_encode(mask)), mask)


def test_rle_starts_with_zero_run():
    mask = np.ones((2, 3), dtype=bool)
    enc = rle_encode(mask)
    assert enc["counts"][0] == 0 and enc["counts"][1] == 6


def test_rle_row_major():
    mask = np.zeros((2, 4), dtype=bool)
    mask[0, 1] = True
    assert rle_encode(mask)["counts"] == [1, 1, 6]


def test_rle_length_mismatch_error():
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "counts": [5]})


# -- embedding store -------------------------------------------------------------


def test_store_roundtrip_exact(tmp_path, rng):
    vecs = {f"r{i}": rng.normal(size=16).astype(np.float32) for i in range(50)}
    with EmbeddingStoreWriter(tmp_path, d_text=16, shard_size=20) as w:
        for k, v in vecs.items():
            w.put(k, v)
    store = EmbeddingStore(tmp_path)
    assert len(store) == 50
    for k, v in vecs.items():
        back = store.read(k)
        assert back.dtype == np.float16
        assert np.array_equal(back, v.astype(np.float16))
        assert np.abs(back.astype(np.float32) - v).max() <= 1e-3


def test_store_missing_key(tmp_path, rng):
    with EmbeddingStoreWriter(tmp_path, d_text=4) as w:
        w.put("present", rng.normal(size=4))
    store = EmbeddingStore(tmp_path)
    with pytest.raises(EmbeddingNotFound):
        store.read("absent")


def test_store_duplicate_key(tmp_path, rng):
    with EmbeddingStoreWriter(tmp_path, d_text=4) as w:
        w.put("x", rng.normal(size=4))
        with pytest.raises(ValueError):
            w.put("x", rng.normal(size=4))


def test_store_detects_corruption(tmp_path, rng):
    with EmbeddingStoreWriter(tmp_path, d_text=8) as w:
        w.put("victim", rng.normal(size=8))
    store = EmbeddingStore(tmp_path)
    shard, offset = store._index["victim"]
    raw = bytearray(shard.read_bytes())
    payload_at = offset + 4 + len(b"victim") + 4  # key_len + key + crc
    raw[payload_at] ^= 0xFF
    shard.write_bytes(bytes(raw))
    with pytest.raises(StoreCorruption):
        EmbeddingStore(tmp_path).read("victim")


def test_store_many_records_sharded(tmp_path, rng):
    n = 10000
    with EmbeddingStoreWriter(tmp_path, d_text=8, shard_size=4096) as w:
        for i in range(n):
            w.put(f"key{i:05d}", rng.normal(size=8))
    shards = sorted(tmp_path.glob("embeddings-*.tap"))
    assert len(shards) == 3
    for shard in shards:
        keys = [k for k, _ in read_shard_index(shard)]
        assert keys == sorted(keys)  # in-shard index is monotone
    store = EmbeddingStore(tmp_path)
    assert len(store) == n
    for i in range(0, n, 997):
        assert store.read(f"key{i:05d}").shape == (8,)


# -- precompute -------------------------------------------------------------------


def test_precompute_bijection_and_determinism(tmp_path, tiny_dataset):
    teacher = SyntheticTeacher(d_text=16, seed=0, sigma=0.05)
    n1 = precompute_embeddings(tiny_dataset, teacher, tmp_path / "a")
    n2 = precompute_embeddings(tiny_dataset, teacher, tmp_path / "b")
    assert n1 == n2 == tiny_dataset.num_regions
    sa = sorted((tmp_path / "a").iterdir())
    sb = sorted((tmp_path / "b").iterdir())
    assert [p.name for p in sa] == [p.name for p in sb]
    for p, q in zip(sa, sb):
        assert p.read_bytes() == q.read_bytes()
    store = EmbeddingStore(tmp_path / "a")
    assert set(store.keys()) == {r.region_id for _, r in tiny_dataset.iter_regions()}


def test_precompute_sigma0_nearest_concept(tmp_path, tiny_dataset):
    teacher = SyntheticTeacher(d_text=32, seed=0, sigma=0.0)
    precompute_embeddings(tiny_dataset, teacher, tmp_path / "s0")
    store = EmbeddingStore(tmp_path / "s0")
    vocab = ConceptVocabulary(tuple(tiny_dataset.concepts))
    w = build_concept_weights(vocab, teacher, "target")
    for _, region in tiny_dataset.iter_regions():
        e = store.read(region.region_id).astype(np.float64)
        nearest = vocab.concepts[int(np.argmax(e @ w.columns))]
        assert nearest == region.concept
