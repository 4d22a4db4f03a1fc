import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
import hypothesis.strategies as st

from edgeinfer.data import (DatasetItem, DatasetManifest, SplitPlan, augment,
                            augment_image, check_no_leakage, ingest,
                            load_manifest, save_manifest, split)
from edgeinfer.errors import DataError


def _make_dataset(root, per_class=4, classes=("apple", "pear"), size=16):
    rng = np.random.default_rng(0)
    for c in classes:
        d = root / c
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(d / f"{c}{i:03d}.png")
    return root


def _fake_manifest(n_groups, aug_per_group=0, classes=("a",)):
    """In-memory manifest; split never touches the files."""
    items = []
    for ci, c in enumerate(classes):
        for i in range(n_groups):
            items.append(DatasetItem(path=f"{c}/img{i:04d}.png", class_index=ci))
            for k in range(1, aug_per_group + 1):
                items.append(DatasetItem(path=f"{c}/img{i:04d}__aug{k:02d}.png",
                                         class_index=ci, origin="augmented",
                                         seed=i * 1000 + k))
    return DatasetManifest(root="unused", classes=list(classes), items=items)


# -- ingest -------------------------------------------------------------------

def test_ingest_synth_dataset(synth_root):
    m = ingest(synth_root)
    assert m.classes == ["clear", "lesion"]
    assert m.counts_per_class() == {"clear": 25, "lesion": 25}
    assert all(it.origin == "original" for it in m.items)
    assert not m.warnings


def test_ingest_skips_junk_with_warnings(tmp_path):
    _make_dataset(tmp_path, per_class=2)
    (tmp_path / "apple" / "notes.txt").write_text("not an image")
    (tmp_path / "apple" / "broken.png").write_bytes(b"garbage bytes")
    m = ingest(tmp_path)
    assert m.counts_per_class() == {"apple": 2, "pear": 2}
    assert len(m.warnings) == 2
    assert any("notes.txt" in w for w in m.warnings)
    assert any("broken.png" in w for w in m.warnings)


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError) as err:
        ingest(tmp_path / "missing")
    assert err.value.code == "empty-dataset"
    bad = tmp_path / "ds"
    (bad / "empty_class").mkdir(parents=True)
    with pytest.raises(DataError) as err:
        ingest(bad)
    assert err.value.code == "empty-class-directory"


def test_manifest_round_trip(tmp_path, synth_root):
    m = ingest(synth_root)
    save_manifest(m, tmp_path / "manifest.tsv")
    loaded = load_manifest(tmp_path / "manifest.tsv", root=synth_root)
    assert loaded.classes == m.classes
    assert [(i.path, i.class_index, i.origin, i.seed) for i in loaded.items] == \
           [(i.path, i.class_index, i.origin, i.seed) for i in m.items]
    header = (tmp_path / "manifest.tsv").read_text().splitlines()[0]
    assert header == "# edgeinfer dataset manifest v1"


def test_manifest_rejects_malformed_row(tmp_path):
    (tmp_path / "bad.tsv").write_text("a/x.png\tclear\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "bad.tsv")


# -- augmentation -------------------------------------------------------------

def test_augment_multiplies_count_exactly(tmp_path):
    m = ingest(_make_dataset(tmp_path, per_class=3))
    out = augment(m, factor=4, seed=5)
    assert len(out.items) == len(m.items) * 4
    per_class = out.counts_per_class()
    assert per_class == {"apple": 12, "pear": 12}
    augmented = [it for it in out.items if it.origin == "augmented"]
    assert len(augmented) == 18
    assert all("__aug" in it.path for it in augmented)
    # every derived file exists and parses
    for it in augmented:
        with Image.open(out.resolve(it)) as im:
            assert im.size == (16, 16)


def test_augment_factor_one_is_identity(tmp_path):
    m = ingest(_make_dataset(tmp_path, per_class=2))
    before = sorted(p.name for p in (tmp_path / "apple").iterdir())
    out = augment(m, factor=1, seed=0)
    assert [it.path for it in out.items] == [it.path for it in m.items]
    assert sorted(p.name for p in (tmp_path / "apple").iterdir()) == before


def test_augment_rejects_bad_factor(tmp_path):
    m = ingest(_make_dataset(tmp_path, per_class=1))
    with pytest.raises(DataError) as err:
        augment(m, factor=0, seed=0)
    assert err.value.code == "invalid-factor"


def test_augment_is_reproducible(tmp_path):
    m = ingest(_make_dataset(tmp_path / "a", per_class=2))
    m2 = ingest(_make_dataset(tmp_path / "b", per_class=2))
    out1 = augment(m, factor=3, seed=9)
    out2 = augment(m2, factor=3, seed=9)
    for i1, i2 in zip(out1.items, out2.items):
        assert i1.path == i2.path and i1.seed == i2.seed
        if i1.origin == "augmented":
            assert out1.resolve(i1).read_bytes() == out2.resolve(i2).read_bytes()


def test_augment_seed_changes_pixels(tmp_path):
    m = ingest(_make_dataset(tmp_path, per_class=1, classes=("only",)))
    src = Image.open(m.resolve(m.items[0]))
    a = np.asarray(augment_image(src, seed=1))
    b = np.asarray(augment_image(src, seed=2))
    assert a.shape == b.shape == (16, 16, 3)
    assert not np.array_equal(a, b)


def test_group_key_strips_aug_suffix():
    it = DatasetItem(path="lesion/img0007__aug13.png", class_index=1,
                     origin="augmented", seed=42)
    assert it.group_key == "lesion/img0007"
    assert DatasetItem(path="lesion/img0007.png", class_index=1).group_key == \
           "lesion/img0007"


# -- splitting ----------------------------------------------------------------

def test_split_ten_groups_is_7_2_1():
    plan = split(_fake_manifest(10), folds=5, seed=0)
    for fold in range(5):
        counts = {b: len(plan.paths(fold, b)) for b in ("train", "val", "test")}
        assert counts == {"train": 7, "val": 2, "test": 1}


def test_split_largest_remainder_rounding():
    # 13 * (0.7, 0.2, 0.1) = (9.1, 2.6, 1.3): leftover goes to the largest
    # fractional remainder (val)
    plan = split(_fake_manifest(13), folds=2, seed=0)
    counts = {b: len(plan.paths(0, b)) for b in ("train", "val", "test")}
    assert counts == {"train": 9, "val": 3, "test": 1}


@given(st.integers(5, 120), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_split_stratification_within_one(n, seed):
    m = _fake_manifest(n, classes=("a", "b"))
    plan = split(m, folds=2, seed=seed)
    for fold in range(2):
        fold_map = plan.assignment[fold]
        assert set(fold_map) == {it.path for it in m.items}  # total cover
        for c in ("a", "b"):
            per = {b: 0 for b in ("train", "val", "test")}
            for p, b in fold_map.items():
                if p.startswith(f"{c}/"):
                    per[b] += 1
            for bucket, ratio in zip(("train", "val", "test"), (0.7, 0.2, 0.1)):
                assert abs(per[bucket] - n * ratio) < 1.0


def test_split_folds_differ_but_seed_reproduces():
    m = _fake_manifest(30)
    a = split(m, folds=5, seed=4)
    b = split(m, folds=5, seed=4)
    assert a.assignment == b.assignment
    assert a.assignment[0] != a.assignment[1]  # independent shuffles per fold
    c = split(m, folds=5, seed=5)
    assert c.assignment != a.assignment


def test_split_errors():
    with pytest.raises(DataError) as err:
        split(_fake_manifest(10), folds=1)
    assert err.value.code == "invalid-folds"
    with pytest.raises(DataError) as err:
        split(_fake_manifest(3), folds=5)
    assert err.value.code == "class-too-small"


def test_split_counts_groups_not_items():
    # 4 originals x 5 augmented each = 24 items but only 4 groups: too few
    with pytest.raises(DataError) as err:
        split(_fake_manifest(4, aug_per_group=5), folds=5)
    assert err.value.code == "class-too-small"


def test_split_keeps_descendants_with_original():
    m = _fake_manifest(12, aug_per_group=3)
    plan = split(m, folds=5, seed=1)
    check_no_leakage(plan, m)  # does not raise
    for fold_map in plan.assignment:
        for it in m.items:
            if it.origin == "augmented":
                original = it.group_key + ".png"
                assert fold_map[it.path] == fold_map[original]


def test_leakage_detector_fires_on_corruption():
    m = _fake_manifest(12, aug_per_group=1)
    plan = split(m, folds=2, seed=1)
    victim = next(it.path for it in m.items if it.origin == "augmented")
    plan.assignment[0][victim] = ("train" if plan.assignment[0][victim] != "train"
                                  else "test")
    with pytest.raises(DataError) as err:
        check_no_leakage(plan, m)
    assert err.value.code == "split-leakage"


def test_split_plan_json_round_trip(tmp_path):
    plan = split(_fake_manifest(10), folds=3, seed=2)
    plan.save(tmp_path / "plan.json")
    loaded = SplitPlan.load(tmp_path / "plan.json")
    assert loaded.fold_count == 3 and loaded.seed == 2
    assert loaded.assignment == plan.assignment
    assert loaded.classes == plan.classes
