"""Datasets: netpbm decoding oracles, directory layout, synthetic
generator, restriction, and the two samplers."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import prototransfer.data as D
from prototransfer import streams
from prototransfer.augment import identity_pipeline, pipeline_from_preset
from prototransfer.checkpoint import save_ptt1
from prototransfer.errors import ContractError, DataError


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def test_p5_byte_oracle(tmp_path):
    """Hand-written binary PGM: 2x2, maxval 255."""
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 51, 102, 255]))
    img = D._read_netpbm(path)
    assert img.shape == (1, 2, 2)
    assert np.allclose(img.reshape(-1), [0.0, 51 / 255, 102 / 255, 1.0])


def test_p2_ascii_matches_p5(tmp_path):
    a = tmp_path / "a.pgm"
    b = tmp_path / "b.pgm"
    a.write_bytes(b"P2\n# comment line\n3 1\n255\n0 128 255\n")
    b.write_bytes(b"P5\n3 1\n255\n" + bytes([0, 128, 255]))
    assert np.array_equal(D._read_netpbm(a), D._read_netpbm(b))


def test_p6_color_oracle(tmp_path):
    path = tmp_path / "x.ppm"
    path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 128]))
    img = D._read_netpbm(path)
    assert img.shape == (3, 1, 1)
    assert np.allclose(img.reshape(-1), [1.0, 0.0, 128 / 255])


def test_maxval_scaling(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n2 1\n100\n" + bytes([0, 100]))
    img = D._read_netpbm(path)
    assert np.allclose(img.reshape(-1), [0.0, 1.0])


def test_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = (rng.integers(0, 256, (1, 5, 4)) / 255.0).astype(np.float32)
    D.write_pgm(tmp_path / "g.pgm", gray)
    assert np.allclose(D._read_netpbm(tmp_path / "g.pgm"), gray, atol=1 / 510)
    color = (rng.integers(0, 256, (3, 4, 6)) / 255.0).astype(np.float32)
    D.write_ppm(tmp_path / "c.ppm", color)
    assert np.allclose(D._read_netpbm(tmp_path / "c.ppm"), color, atol=1 / 510)


def test_netpbm_error_cases(tmp_path):
    bad_magic = tmp_path / "bad.pgm"
    bad_magic.write_bytes(b"P7\n1 1\n255\n\x00")
    with pytest.raises(DataError):
        D._read_netpbm(bad_magic)
    truncated = tmp_path / "trunc.pgm"
    truncated.write_bytes(b"P5\n4 4\n255\n" + bytes([7] * 3))
    with pytest.raises(DataError, match="truncated"):
        D._read_netpbm(truncated)
    sixteen_bit = tmp_path / "deep.pgm"
    sixteen_bit.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError, match="maxval"):
        D._read_netpbm(sixteen_bit)


# ---------------------------------------------------------------------------
# directory datasets
# ---------------------------------------------------------------------------


def _write_class(root, name, n, size=8, value=None, seed=0):
    cdir = root / name
    cdir.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img = np.full((1, size, size), value, dtype=np.float32) if value is not None else (
            rng.uniform(0, 1, (1, size, size)).astype(np.float32)
        )
        D.write_pgm(cdir / f"s{i:02d}.pgm", img)


def test_directory_loader_lexicographic_classes(tmp_path):
    root = tmp_path / "ds"
    for name in ("zebra", "ant", "mole"):
        _write_class(root, name, 2)
    ds = D.load_directory_dataset(root, 8, 1)
    assert ds.class_names == ["ant", "mole", "zebra"]
    assert len(ds) == 6
    assert ds.images.shape == (6, 1, 8, 8)
    assert ds.images.dtype == np.float32
    assert list(ds.labels) == [0, 0, 1, 1, 2, 2]


def test_directory_loader_resizes(tmp_path):
    root = tmp_path / "ds"
    _write_class(root, "a", 1, size=12, value=0.5)
    _write_class(root, "b", 1, size=6, value=0.25)
    ds = D.load_directory_dataset(root, 8, 1)
    assert ds.images.shape == (2, 1, 8, 8)
    assert np.allclose(ds.images[0], 0.5, atol=1 / 255)
    assert np.allclose(ds.images[1], 0.25, atol=1 / 255)


def test_directory_loader_ptt1_samples(tmp_path):
    root = tmp_path / "ds"
    cdir = root / "only"
    cdir.mkdir(parents=True)
    img = np.random.default_rng(1).uniform(0, 1, (1, 8, 8)).astype(np.float32)
    save_ptt1(cdir / "s.ptt1", {"image": img})
    ds = D.load_directory_dataset(root, 8, 1)
    assert np.array_equal(ds.images[0], img)


def test_directory_loader_errors(tmp_path):
    with pytest.raises(DataError, match="not a directory"):
        D.load_directory_dataset(tmp_path / "missing", 8, 1)
    empty_root = tmp_path / "empty"
    empty_root.mkdir()
    with pytest.raises(DataError, match="no class"):
        D.load_directory_dataset(empty_root, 8, 1)
    root = tmp_path / "ds"
    (root / "void").mkdir(parents=True)
    with pytest.raises(DataError, match="no samples"):
        D.load_directory_dataset(root, 8, 1)


def test_directory_loader_channel_mismatch(tmp_path):
    root = tmp_path / "ds"
    cdir = root / "c"
    cdir.mkdir(parents=True)
    D.write_ppm(cdir / "x.ppm", np.zeros((3, 4, 4), dtype=np.float32))
    with pytest.raises(DataError, match="channel"):
        D.load_directory_dataset(root, 4, 1)


def test_directory_loader_undecodable_file(tmp_path):
    root = tmp_path / "ds"
    cdir = root / "c"
    cdir.mkdir(parents=True)
    (cdir / "junk.pgm").write_bytes(b"not an image at all")
    with pytest.raises(DataError):
        D.load_directory_dataset(root, 4, 1)


def test_split_file_selection(tmp_path):
    root = tmp_path / "ds"
    for name in ("a", "b", "c", "d"):
        _write_class(root, name, 2, seed=ord(name))
    ds = D.load_directory_dataset(root, 8, 1)
    split = tmp_path / "train.txt"
    split.write_text("# train classes\nd\nb\n\n")
    sub = D.select_classes(ds, D.load_split_file(split))
    assert sub.class_names == ["b", "d"]
    assert sub.n_classes == 2
    assert len(sub) == 4
    assert sorted(set(sub.labels.tolist())) == [0, 1]
    with pytest.raises(DataError, match="unknown"):
        D.select_classes(ds, ["nope"])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def test_templates_are_deterministic_and_distinct():
    a = D.class_template(3, 16)
    b = D.class_template(3, 16)
    c = D.class_template(4, 16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (1, 16, 16)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_templates_do_not_depend_on_dataset_seed():
    d1 = D.make_synthetic_dataset(4, 2, 16, noise_std=0.0, seed=1)
    d2 = D.make_synthetic_dataset(4, 2, 16, noise_std=0.0, seed=99)
    assert np.array_equal(d1.images, d2.images)


def test_noiseless_samples_equal_templates_and_classify_perfectly():
    ds = D.make_synthetic_dataset(8, 4, 16, noise_std=0.0, seed=0)
    templates = np.stack([D.class_template(c, 16) for c in range(8)])
    flat_t = templates.reshape(8, -1)
    for i in range(len(ds)):
        d2 = np.sum((ds.images[i].reshape(-1)[None, :] - flat_t) ** 2, axis=1)
        assert int(np.argmin(d2)) == int(ds.labels[i])
        assert d2[ds.labels[i]] == 0.0  # noiseless means exactly the template


def test_noisy_samples_vary_but_stay_in_range():
    ds = D.make_synthetic_dataset(4, 6, 16, noise_std=0.1, seed=5)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert not np.array_equal(ds.images[0], ds.images[1])  # same class, different noise
    again = D.make_synthetic_dataset(4, 6, 16, noise_std=0.1, seed=5)
    assert np.array_equal(ds.images, again.images)


def test_class_offset_changes_template_family():
    base = D.make_synthetic_dataset(4, 2, 16, noise_std=0.0, seed=0)
    shifted = D.make_synthetic_dataset(4, 2, 16, noise_std=0.0, seed=0, class_offset=100)
    assert not np.array_equal(base.images, shifted.images)
    assert shifted.class_names[0] == "synth_100"


def test_synthetic_needs_two_classes():
    with pytest.raises(ContractError):
        D.make_synthetic_dataset(1, 4)


# ---------------------------------------------------------------------------
# restriction
# ---------------------------------------------------------------------------


def test_restrict_classes_keeps_whole_classes():
    ds = D.make_synthetic_dataset(10, 6, 16, seed=0)
    sub = D.restrict(ds, n_classes=4, seed=3)
    assert sub.n_classes == 4
    assert len(sub) == 4 * 6
    counts = np.bincount(sub.labels)
    assert np.all(counts == 6)
    assert set(sub.class_names) <= set(ds.class_names)
    again = D.restrict(ds, n_classes=4, seed=3)
    assert sub.class_names == again.class_names


def test_restrict_images_uniform_and_densified():
    ds = D.make_synthetic_dataset(5, 10, 16, seed=0)
    sub = D.restrict(ds, n_images=12, seed=7)
    assert len(sub) == 12
    assert sub.labels.max() == sub.n_classes - 1
    assert len(sub.class_names) == sub.n_classes


def test_restrict_bounds():
    ds = D.make_synthetic_dataset(4, 4, 16, seed=0)
    with pytest.raises(ContractError):
        D.restrict(ds, n_classes=9)
    with pytest.raises(ContractError):
        D.restrict(ds, n_images=0)


# ---------------------------------------------------------------------------
# pre-training sampler
# ---------------------------------------------------------------------------


def test_pretrain_batch_shapes_and_distinct_indices():
    ds = D.make_synthetic_dataset(8, 8, 16, seed=0)
    pipe = identity_pipeline(1, 16)
    batch = D.sample_pretrain_batch(ds, n=10, q=3, pipeline=pipe, master_seed=0, iteration=0)
    assert batch.prototypes.shape == (10, 1, 16, 16)
    assert batch.queries.shape == (10, 3, 1, 16, 16)
    assert len(set(batch.indices.tolist())) == 10  # without replacement


def test_pretrain_batch_never_consults_labels():
    """Bitwise identical batches under arbitrary label permutation."""
    ds = D.make_synthetic_dataset(8, 8, 16, seed=0)
    rng = np.random.default_rng(0)
    shuffled = D.Dataset(
        images=ds.images,
        labels=rng.permutation(ds.labels),
        class_names=ds.class_names,
        split=ds.split,
        source=ds.source,
    )
    pipe = pipeline_from_preset("synthetic", 1, 16)
    for it in range(3):
        a = D.sample_pretrain_batch(ds, 6, 2, pipe, 11, it)
        b = D.sample_pretrain_batch(shuffled, 6, 2, pipe, 11, it)
        assert np.array_equal(a.prototypes, b.prototypes)
        assert np.array_equal(a.queries, b.queries)
        assert np.array_equal(a.indices, b.indices)


def test_pretrain_batch_deterministic_per_iteration():
    ds = D.make_synthetic_dataset(8, 8, 16, seed=0)
    pipe = pipeline_from_preset("synthetic", 1, 16)
    a = D.sample_pretrain_batch(ds, 6, 2, pipe, 5, 3)
    b = D.sample_pretrain_batch(ds, 6, 2, pipe, 5, 3)
    c = D.sample_pretrain_batch(ds, 6, 2, pipe, 5, 4)
    assert np.array_equal(a.queries, b.queries)
    assert not np.array_equal(a.indices, c.indices) or not np.array_equal(a.queries, c.queries)


def test_pretrain_batch_query_streams_are_independent():
    """Each (i, q) view draws from its own derived stream, so the i-th
    query set does not depend on how many other prototypes exist."""
    ds = D.make_synthetic_dataset(8, 8, 16, seed=0)
    pipe = pipeline_from_preset("synthetic", 1, 16)
    full = D.sample_pretrain_batch(ds, 6, 2, pipe, 5, 0)
    # re-apply the augmentation for prototype 4 view 1 from its stream
    rng = streams.derive_rng(5, streams.AUG, 0, 4, 1)
    again = pipe.apply(full.prototypes[4], rng)
    assert np.array_equal(full.queries[4, 1], again)


def test_pretrain_batch_contract_errors():
    ds = D.make_synthetic_dataset(4, 2, 16, seed=0)
    pipe = identity_pipeline(1, 16)
    with pytest.raises(ContractError, match="query"):
        D.sample_pretrain_batch(ds, 4, 0, pipe, 0, 0)
    with pytest.raises(ContractError, match="exceeds"):
        D.sample_pretrain_batch(ds, 9, 1, pipe, 0, 0)
    wrong_size = identity_pipeline(1, 28)
    with pytest.raises(ContractError, match="geometry"):
        D.sample_pretrain_batch(ds, 2, 1, wrong_size, 0, 0)


# ---------------------------------------------------------------------------
# episode sampler
# ---------------------------------------------------------------------------


def test_episode_structure():
    ds = D.make_synthetic_dataset(8, 10, 16, seed=0)
    ep = D.sample_episode(ds, n_ways=5, k_shots=3, q_queries=4, rng=np.random.default_rng(0))
    assert ep.support_images.shape == (15, 1, 16, 16)
    assert ep.query_images.shape == (20, 1, 16, 16)
    assert list(ep.support_labels) == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3 + [4] * 3
    assert list(ep.query_labels) == sum([[c] * 4 for c in range(5)], [])
    assert len(set(ep.class_ids.tolist())) == 5


def test_episode_support_query_disjoint():
    ds = D.make_synthetic_dataset(6, 9, 16, seed=0)
    ep = D.sample_episode(ds, 4, 2, 5, np.random.default_rng(1))
    assert not set(ep.support_ids.tolist()) & set(ep.query_ids.tolist())
    # episode-local labels map back to the sampled classes
    for local, cls in enumerate(ep.class_ids):
        ids = ep.support_ids[ep.support_labels == local]
        assert np.all(ds.labels[ids] == cls)


def test_episode_errors():
    ds = D.make_synthetic_dataset(4, 5, 16, seed=0)
    with pytest.raises(ContractError, match="way"):
        D.sample_episode(ds, 5, 1, 1, np.random.default_rng(0))
    with pytest.raises(ContractError, match="needs 6"):
        D.sample_episode(ds, 2, 3, 3, np.random.default_rng(0))
    unlabeled = D.Dataset(ds.images, None, None)
    with pytest.raises(ContractError, match="label"):
        D.sample_episode(unlabeled, 2, 1, 1, np.random.default_rng(0))


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_episode_sampler_property(seed):
    ds = D.make_synthetic_dataset(7, 8, 16, seed=0)
    ep = D.sample_episode(ds, 5, 2, 3, np.random.default_rng(seed))
    assert not set(ep.support_ids.tolist()) & set(ep.query_ids.tolist())
    assert len(set(ep.class_ids.tolist())) == 5
    for local, cls in enumerate(ep.class_ids):
        q_ids = ep.query_ids[ep.query_labels == local]
        assert np.all(ds.labels[q_ids] == cls)
