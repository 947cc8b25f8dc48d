import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sespp.data import (
    CohortSpec,
    Normalizer,
    PatientRecord,
    Sample,
    SplitError,
    SplitPlan,
    Augmenter,
    _patient,
    balance_minority,
    bilinear_resize,
    generate_cohort,
    load_cohort,
    make_split,
    save_cohort,
    stack_and_resize,
    to_arrays,
    train_time_augment,
    vertical_flip,
)

TINY = CohortSpec(6, 9, (1, 3), 16, 1.0, 3)


def fake_records(n_res, n_sens, slices_res=1, slices_sens=1, size=2):
    """Records with tiny constant slices; ``slices_*`` may be an int or a per-patient list."""
    out = []
    for i in range(n_res + n_sens):
        res = i < n_res
        per = slices_res if res else slices_sens
        n = per if isinstance(per, int) else per[i if res else i - n_res]
        z = np.full((size, size), float(i), dtype=np.float32)
        out.append(PatientRecord(f"P{i + 1:04d}", "resistant" if res else "sensitive",
                                 [Sample(z + j, z - j) for j in range(n)]))
    return out


def slice_count(records, label):
    return sum(len(r.slices) for r in records if r.label == label)


# -- generator ------------------------------------------------------------


def test_default_cohort_class_sizes():
    spec = CohortSpec(97, 192, (1, 1), 8, 1.0, 0)
    recs = generate_cohort(spec)
    c = Counter(r.label for r in recs)
    assert c == {"resistant": 97, "sensitive": 192}
    assert len({r.patient_id for r in recs}) == 289


def test_generator_is_deterministic():
    a, b = generate_cohort(TINY), generate_cohort(TINY)
    assert [r.label for r in a] == [r.label for r in b]
    for ra, rb in zip(a, b):
        for sa, sb in zip(ra.slices, rb.slices):
            np.testing.assert_array_equal(sa.ct, sb.ct)
            np.testing.assert_array_equal(sa.pet, sb.pet)


def test_zero_signal_classes_are_identically_distributed():
    spec = CohortSpec(3, 3, (2, 2), 16, 0.0, 9)
    for i in range(6):
        res, sens = _patient(spec, i, True), _patient(spec, i, False)
        for a, b in zip(res, sens):
            np.testing.assert_array_equal(a.ct, b.ct)
            np.testing.assert_array_equal(a.pet, b.pet)


def test_signal_brightens_resistant_pet_more_than_ct():
    spec = CohortSpec(20, 20, (2, 2), 32, 1.0, 1)
    recs = generate_cohort(spec)
    def mean_max(label, ch):
        return np.mean([getattr(s, ch).max() for r in recs if r.label == label for s in r.slices])
    pet_gap = mean_max("resistant", "pet") - mean_max("sensitive", "pet")
    assert pet_gap > 0.5


def test_samples_are_finite_and_paired():
    for r in generate_cohort(TINY):
        assert 1 <= len(r.slices) <= 3
        for s in r.slices:
            assert s.ct.shape == s.pet.shape == (16, 16)
            assert np.all(np.isfinite(s.ct)) and np.all(np.isfinite(s.pet))


@pytest.mark.parametrize("kw", [dict(n_resistant=0), dict(slices_per_patient=(3, 2)), dict(class_signal=1.5)])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        generate_cohort(CohortSpec(**{**TINY.to_dict(), "slices_per_patient": (1, 3), **kw}))


def test_sample_shape_mismatch():
    with pytest.raises(ValueError):
        Sample(np.zeros((2, 2)), np.zeros((3, 3)))


# -- resize ---------------------------------------------------------------


def test_resize_identity_is_exact(rng):
    img = rng.standard_normal((64, 64)).astype(np.float32)
    s = Sample(img, img * 2)
    out = stack_and_resize(s, 64)
    assert out.shape == (2, 64, 64)
    np.testing.assert_array_equal(out[0], img)
    np.testing.assert_array_equal(out[1], img * 2)


def test_resize_preserves_constants():
    out = bilinear_resize(np.full((32, 32), 3.25, dtype=np.float32), 224)
    assert out.shape == (224, 224)
    np.testing.assert_array_equal(out, 3.25)


def test_checkerboard_center_is_half():
    out = bilinear_resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 3)
    assert out[1, 1] == 0.5
    np.testing.assert_array_equal(out[0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(out[:, 0], [0.0, 0.5, 1.0])


def test_resize_degenerate():
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((1, 5)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(2, 12), st.integers(0, 1000))
def test_resize_corners_and_range(h, w, target, seed):
    img = np.random.default_rng(seed).standard_normal((h, w))
    out = bilinear_resize(img, target)
    for (i, j), (a, b) in zip([(0, 0), (0, -1), (-1, 0), (-1, -1)], [(0, 0), (0, -1), (-1, 0), (-1, -1)]):
        assert out[i, j] == pytest.approx(img[a, b], abs=1e-12)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# -- balancing ------------------------------------------------------------


def test_doubling_law_2079_slices():
    # 97 resistant patients carrying 2079 slices in total (21 or 22 each)
    per = [22] * 42 + [21] * 55
    assert sum(per) == 2079
    recs = fake_records(97, 192, per, 12)
    out = balance_minority(recs)
    assert slice_count(out, "resistant") == 4158
    assert slice_count(out, "sensitive") == slice_count(recs, "sensitive")
    assert [r.label for r in out] == [r.label for r in recs]
    assert [r.patient_id for r in out] == [r.patient_id for r in recs]


def test_balance_equal_classes_is_noop():
    recs = fake_records(3, 3, 2, 2)
    out = balance_minority(recs)
    assert [len(r.slices) for r in out] == [len(r.slices) for r in recs]


def test_rotated_copies_are_ccw_permutations(rng):
    img = rng.standard_normal((4, 4)).astype(np.float32)
    recs = [PatientRecord("P0001", "resistant", [Sample(img, img + 1)]),
            PatientRecord("P0002", "sensitive", [Sample(img, img), Sample(img, img)])]
    out = balance_minority(recs)
    original, copy = out[0].slices
    assert copy.provenance == "rotated90"
    np.testing.assert_array_equal(copy.ct, np.rot90(img))
    assert copy.ct[0, 0] == img[0, -1]  # counterclockwise: top-left comes from top-right
    np.testing.assert_array_equal(np.sort(copy.ct.ravel()), np.sort(original.ct.ravel()))
    assert out[1] is recs[1]


def test_minority_is_decided_by_slices_not_patients():
    recs = fake_records(2, 4, 5, 1)
    out = balance_minority(recs)
    assert slice_count(out, "sensitive") == 8
    assert slice_count(out, "resistant") == 10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.lists(st.integers(1, 4), min_size=1, max_size=6))
def test_doubling_law_property(res, sens):
    recs = fake_records(len(res), len(sens), res, sens)
    out = balance_minority(recs)
    r0, s0 = sum(res), sum(sens)
    if r0 == s0:
        assert (slice_count(out, "resistant"), slice_count(out, "sensitive")) == (r0, s0)
    elif r0 < s0:
        assert (slice_count(out, "resistant"), slice_count(out, "sensitive")) == (2 * r0, s0)
    else:
        assert (slice_count(out, "resistant"), slice_count(out, "sensitive")) == (r0, 2 * s0)


# -- splitting ------------------------------------------------------------


def test_split_289_fold_sizes():
    recs = fake_records(97, 192)
    plan = make_split(recs, 5, seed=0)
    labels = {r.patient_id: r.label for r in recs}
    sizes = Counter(plan.folds.values())
    res = Counter(f for pid, f in plan.folds.items() if labels[pid] == "resistant")
    assert sorted(sizes.values(), reverse=True) == [58, 58, 58, 58, 57]
    assert sorted(res.values(), reverse=True) == [20, 20, 19, 19, 19]


def test_split_ten_patients():
    recs = fake_records(5, 5)
    plan = make_split(recs, 5, seed=1)
    assert Counter(plan.folds.values()) == {f: 2 for f in range(5)}
    train, val, test = plan.subsets(0)
    assert (len(train), len(val), len(test)) == (6, 2, 2)


def test_split_ratio_matches_fold_arrangement():
    recs = fake_records(100, 100)
    plan = make_split(recs, 10, seed=0)
    train, val, test = plan.subsets(3)
    assert (len(train), len(val), len(test)) == (160, 20, 20)


def test_split_errors():
    with pytest.raises(SplitError):
        make_split(fake_records(3, 10), 5)
    with pytest.raises(SplitError):
        make_split(fake_records(3, 3), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(3, 30), st.integers(3, 6), st.integers(0, 10_000))
def test_split_is_leak_free_partition(n_res, n_sens, k, seed):
    if min(n_res, n_sens) < k:
        return
    recs = balance_minority(fake_records(n_res, n_sens, 2, 1))
    plan = make_split(recs, k, seed)
    assert set(plan.folds) == {r.patient_id for r in recs}
    seen_test = []
    for f in range(k):
        train, val, test = (set(s) for s in plan.subsets(f))
        assert not (train & val) and not (train & test) and not (val & test)
        assert train | val | test == set(plan.folds)
        seen_test.extend(test)
        # every slice, rotated copies included, lands in its patient's subset
        for subset in (train, val, test):
            _, _, pids = to_arrays(recs, subset) if subset else (None, None, [])
            assert set(pids) <= subset
    assert sorted(seen_test) == sorted(plan.folds)


def test_split_json_roundtrip():
    plan = make_split(fake_records(6, 6), 3, seed=4)
    again = SplitPlan.from_json(plan.to_json())
    assert again == plan
    assert json.loads(plan.to_json())["k"] == 3


# -- arrays, normalization, augmentation ----------------------------------


def test_to_arrays_channels():
    recs = generate_cohort(TINY)
    X, y, pids = to_arrays(recs, size=8)
    assert X.shape[1:] == (2, 8, 8) and X.dtype == np.float32
    assert len(X) == len(y) == len(pids) == sum(len(r.slices) for r in recs)
    Xc, _, _ = to_arrays(recs, size=8, channels="ct_only")
    np.testing.assert_array_equal(Xc[:, 0], X[:, 0])
    assert Xc.shape[1] == 1


def test_normalized_train_stats(rng):
    X = (rng.standard_normal((20, 2, 8, 8)) * [[[[3.0]], [[0.2]]]] + [[[[5.0]], [[-1.0]]]]).astype(np.float32)
    Z = Normalizer.fit(X)(X).astype(np.float64)
    assert np.all(np.abs(Z.mean(axis=(0, 2, 3))) < 1e-4)
    assert np.all(np.abs(Z.std(axis=(0, 2, 3)) - 1) < 1e-3)


def test_constant_channel_is_guarded():
    X = np.ones((4, 2, 3, 3), dtype=np.float32)
    Z = Normalizer.fit(X)(X)
    assert np.all(np.isfinite(Z)) and np.all(Z == 0)


def test_normalizer_depends_only_on_train(rng):
    recs = generate_cohort(TINY)
    plan = make_split(recs, 3, seed=0)
    train, _, _ = plan.subsets(0)
    Xa, _, _ = to_arrays(recs, train, size=8)
    a = Normalizer.fit(Xa)
    # perturb every non-training image; statistics must not move
    for r in recs:
        if r.patient_id not in train:
            for s in r.slices:
                s.pet += 100.0
    b = Normalizer.fit(to_arrays(recs, train, size=8)[0])
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std, b.std)


def test_zero_flip_probability_only_normalizes(rng):
    X = rng.standard_normal((5, 2, 4, 4)).astype(np.float32)
    norm = Normalizer.fit(X)
    np.testing.assert_array_equal(train_time_augment(X, rng, norm, flip_prob=0.0), norm(X))


def test_double_flip_is_identity(rng):
    X = rng.standard_normal((3, 2, 5, 4))
    np.testing.assert_array_equal(vertical_flip(vertical_flip(X)), X)
    np.testing.assert_array_equal(vertical_flip(X)[:, :, 0], X[:, :, -1])


def test_flips_are_per_sample_with_half_probability(rng):
    X = np.arange(4, dtype=np.float32).reshape(1, 1, 4, 1).repeat(4000, axis=0)
    aug = Augmenter(Normalizer(np.zeros(1), np.ones(1)))
    out = aug.train_batch(X, rng)
    flipped = out[:, 0, 0, 0] == 3
    assert np.all(flipped | (out[:, 0, 0, 0] == 0))
    assert abs(flipped.mean() - 0.5) < 0.03
    assert aug.flip_calls == 1
    aug.eval_batch(X)
    assert aug.flip_calls == 1


def test_augmentation_is_seed_reproducible():
    X = np.random.default_rng(0).standard_normal((16, 2, 4, 4)).astype(np.float32)
    norm = Normalizer.fit(X)
    a = train_time_augment(X, np.random.default_rng(5), norm)
    b = train_time_augment(X, np.random.default_rng(5), norm)
    np.testing.assert_array_equal(a, b)


# -- on-disk cohort -------------------------------------------------------


def test_cohort_roundtrip(tmp_path):
    recs = generate_cohort(TINY)
    save_cohort(recs, TINY, tmp_path / "c")
    assert (tmp_path / "c" / "P0001" / "label.txt").read_text().strip() in ("resistant", "sensitive")
    assert (tmp_path / "c" / "P0001" / "slice_000.ct.pltn").exists()
    spec, loaded = load_cohort(tmp_path / "c")
    assert spec == TINY
    assert [(r.patient_id, r.label, len(r.slices)) for r in loaded] == [
        (r.patient_id, r.label, len(r.slices)) for r in recs]
    for a, b in zip(recs, loaded):
        for sa, sb in zip(a.slices, b.slices):
            np.testing.assert_array_equal(sa.ct, sb.ct)
            np.testing.assert_array_equal(sa.pet, sb.pet)


def test_load_missing_cohort(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cohort(tmp_path)
