from dataclasses import replace

import numpy as np
import pytest

from bisample import datagen as dg
from bisample.errors import InvalidArgument
from bisample.rngkit import substream


def small_spec(**kw):
    base = dict(n_classes=100, input_dim=16, latent_dim=4, seed=7)
    base.update(kw)
    return dg.GenSpec(**base)


def mean_intra_inter(ds):
    def unit(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    idn, spotn = unit(ds.id_inputs), unit(ds.spot_inputs)
    intra = np.mean(np.sum(idn * spotn, axis=1))
    cross = idn @ spotn.T
    inter = (cross.sum() - np.trace(cross)) / (cross.size - cross.shape[0])
    return intra, inter


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        small_spec(spot_noise_sigma=0.01, id_noise_sigma=0.05)
    with pytest.raises(InvalidArgument):
        small_spec(mislabel_rate=1.0)
    with pytest.raises(InvalidArgument):
        small_spec(n_classes=0)


def test_noiseless_limit_id_equals_spot():
    spec = small_spec(id_noise_sigma=0.0, spot_noise_sigma=0.0, heterogeneity_shift=0.0,
                      mislabel_rate=0.0, low_quality_rate=0.0)
    ds = dg.generate(spec)
    assert np.array_equal(ds.id_inputs, ds.spot_inputs)


def test_same_seed_gives_identical_files(tmp_path):
    spec = small_spec()
    p1, p2 = tmp_path / "a.lbld", tmp_path / "b.lbld"
    dg.save_bisample(dg.generate(spec), p1)
    dg.save_bisample(dg.generate(spec), p2)
    assert dg.file_sha256(p1) == dg.file_sha256(p2)
    other = tmp_path / "c.lbld"
    dg.save_bisample(dg.generate(replace(spec, seed=8)), other)
    assert dg.file_sha256(other) != dg.file_sha256(p1)


def test_mislabel_count_exact():
    ds = dg.generate(small_spec(mislabel_rate=0.1, low_quality_rate=0.0))
    flagged = [c for c, tags in ds.flags.items() if dg.FLAG_MISLABEL in tags]
    assert len(flagged) == 10  # floor(0.1 * 100), paired


def test_mislabel_odd_floor_drops_to_even():
    ds = dg.generate(small_spec(n_classes=30, mislabel_rate=0.1, low_quality_rate=0.0))
    flagged = [c for c, tags in ds.flags.items() if dg.FLAG_MISLABEL in tags]
    assert len(flagged) == 2  # floor(3) -> 2 participants


def test_mislabel_swaps_are_pairwise_spot_exchanges():
    spec = small_spec(mislabel_rate=0.1, low_quality_rate=0.0)
    noisy = dg.generate(spec)
    clean = dg.generate(replace(spec, mislabel_rate=0.0))
    assert np.array_equal(noisy.id_inputs, clean.id_inputs)
    moved = [c for c in range(spec.n_classes) if not np.array_equal(noisy.spot_inputs[c], clean.spot_inputs[c])]
    assert sorted(moved) == sorted(c for c, t in noisy.flags.items() if dg.FLAG_MISLABEL in t)
    assert sorted(map(tuple, noisy.spot_inputs[moved])) == sorted(map(tuple, clean.spot_inputs[moved]))


def test_low_quality_count_and_noise_level():
    spec = small_spec(low_quality_rate=0.05, mislabel_rate=0.0)
    ds = dg.generate(spec)
    clean = dg.generate(replace(spec, low_quality_rate=0.0))
    flagged = [c for c, tags in ds.flags.items() if dg.FLAG_LOW_QUALITY in tags]
    assert len(flagged) == 5
    lowq_norm = np.linalg.norm(ds.spot_inputs[flagged] - clean.id_inputs[flagged], axis=1).mean()
    normal = [c for c in range(100) if c not in flagged]
    base_norm = np.linalg.norm(clean.spot_inputs[normal] - clean.id_inputs[normal], axis=1).mean()
    assert lowq_norm > 2.0 * base_norm


def test_separation_sanity_with_default_noise():
    ds = dg.generate(dg.GenSpec(n_classes=400, seed=3))
    intra, inter = mean_intra_inter(ds)
    assert intra > inter + 0.1


def test_heterogeneity_shift_monotone():
    intras = []
    for shift in (0.0, 0.5, 1.0):
        ds = dg.generate(small_spec(heterogeneity_shift=shift, mislabel_rate=0.0, low_quality_rate=0.0))
        intras.append(mean_intra_inter(ds)[0])
    assert intras[0] > intras[1] > intras[2]


def test_disjoint_id_ranges_are_distinct_identities():
    a = dg.generate(small_spec(class_id_start=0, mislabel_rate=0.0, low_quality_rate=0.0))
    b = dg.generate(small_spec(class_id_start=100, mislabel_rate=0.0, low_quality_rate=0.0))
    def unit(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)
    cross = unit(a.id_inputs) @ unit(b.id_inputs).T
    assert np.abs(np.diag(cross)).mean() < 0.5  # same rows are unrelated people


# -- thick / mini ------------------------------------------------------------


def test_generate_thick_shape_and_determinism():
    spec = small_spec()
    thick = dg.generate_thick(spec, 8)
    assert thick.samples.shape == (100, 8, 16)
    again = dg.generate_thick(spec, 8)
    assert np.array_equal(thick.samples, again.samples)
    with pytest.raises(InvalidArgument):
        dg.generate_thick(spec, 2)


def test_split_counts():
    thick_spec = small_spec(n_classes=50, class_id_start=0)
    mini_spec = small_spec(n_classes=200, class_id_start=50)
    thick, mini = dg.split_thick_mini(thick_spec, mini_spec, samples_per_class=16)
    assert thick.samples.shape[0] * thick.samples.shape[1] == 800
    assert mini.n_classes * 2 == 400


def test_split_rejects_overlapping_ranges():
    with pytest.raises(InvalidArgument):
        dg.split_thick_mini(small_spec(n_classes=50, class_id_start=0),
                            small_spec(n_classes=200, class_id_start=49))


def test_split_mini_matches_resampling_oracle():
    thick_spec = small_spec(n_classes=10, class_id_start=0)
    mini_spec = small_spec(n_classes=20, class_id_start=10)
    _, mini = dg.split_thick_mini(thick_spec, mini_spec, samples_per_class=6)
    # oracle: regenerate each class pool from its stream and redo the 2-of-S draw
    proj = dg._projection(mini_spec)
    for i in range(mini.n_classes):
        rng = substream(mini_spec.seed, "class", mini_spec.class_id_start + i)
        z = rng.standard_normal(mini_spec.latent_dim)
        s, f = mini_spec.spot_noise_sigma, mini_spec.confusion_frac
        latent = np.sqrt(f) * s * (rng.standard_normal((6, mini_spec.latent_dim)) @ proj.T)
        iso = np.sqrt(1 - f) * s / np.sqrt(16) * rng.standard_normal((6, 16))
        pool = (proj @ z)[None, :] + (latent + iso)
        first = int(rng.integers(0, 6))
        second = int(rng.integers(0, 5))
        if second >= first:
            second += 1
        assert np.array_equal(mini.id_inputs[i], pool[first])
        assert np.array_equal(mini.spot_inputs[i], pool[second])


def test_subset_reindexes():
    ds = dg.generate(small_spec())
    sub = dg.subset(ds, np.array([5, 9, 42]))
    assert sub.n_classes == 3
    assert np.array_equal(sub.id_inputs[1], ds.id_inputs[9])


# -- pairs -------------------------------------------------------------------


def test_pair_counts_tiny():
    ds = dg.generate(small_spec(n_classes=2))
    pairs = dg.make_test_pairs(ds)
    assert pairs.n_genuine == 2 and pairs.n_impostor == 2


def test_pair_counts_by_enumeration():
    ds = dg.generate(small_spec(n_classes=100))
    pairs = dg.make_test_pairs(ds)
    seen = set(zip(pairs.id_idx.tolist(), pairs.spot_idx.tolist()))
    assert len(seen) == 100 * 100
    assert pairs.n_genuine == 100
    assert pairs.n_impostor == 9900


def test_pair_counts_at_benchmark_scale():
    ds = dg.BisampleDataset(id_inputs=np.zeros((4000, 1)), spot_inputs=np.zeros((4000, 1)))
    pairs = dg.make_test_pairs(ds)
    assert pairs.n_genuine == 4000
    assert pairs.n_impostor == 15_996_000


# -- files -------------------------------------------------------------------


def test_bisample_roundtrip_bit_exact(tmp_path):
    ds = dg.generate(small_spec())
    p1, p2 = tmp_path / "a.lbld", tmp_path / "b.lbld"
    dg.save_bisample(ds, p1)
    loaded = dg.load_bisample(p1)
    dg.save_bisample(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.n_classes == 100 and loaded.input_dim == 16


def test_thick_roundtrip_bit_exact(tmp_path):
    thick = dg.generate_thick(small_spec(n_classes=20), 5)
    p1, p2 = tmp_path / "a.lblt", tmp_path / "b.lblt"
    dg.save_thick(thick, p1)
    loaded = dg.load_thick(p1)
    dg.save_thick(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.samples_per_class == 5


def test_flags_sidecar(tmp_path):
    ds = dg.generate(small_spec(mislabel_rate=0.04, low_quality_rate=0.03))
    path = tmp_path / "flags.txt"
    dg.write_flags_sidecar(ds, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == sum(len(t) for t in ds.flags.values())
    assert all(line.split(",")[1] in (dg.FLAG_MISLABEL, dg.FLAG_LOW_QUALITY) for line in lines)
