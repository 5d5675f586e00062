import filecmp
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from robustseg.data import (DataConfig, erode, generate_dataset, generate_sample, load_manifest, load_sample,
                            load_split, rasterize, save_sample, split_counts)
from robustseg.numerics import FormatError
from robustseg.numerics.bundle import encode_bundle


def _tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_identical_tree(tmp_path):
    generate_dataset(tmp_path / "a", 7, 30)
    generate_dataset(tmp_path / "b", 7, 30, workers=3)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_dataset(tmp_path / "a", 7, 12)
    generate_dataset(tmp_path / "b", 8, 12)
    assert _tree_bytes(tmp_path / "a") != _tree_bytes(tmp_path / "b")


def test_split_70_30(tmp_path):
    m = generate_dataset(tmp_path, 1, 100)
    tags = Counter(e["split"] for e in m["samples"])
    assert tags == {"train": 70, "val": 30}
    assert split_counts(100) == 70 and split_counts(15) == 11
    assert len({e["id"] for e in m["samples"]}) == 100


def test_n_below_ten_rejected(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(tmp_path, 1, 9)


def _check_invariants(s):
    h, w = s.gt_mask.shape
    area = s.gt_mask.sum()
    assert 16 <= area <= 0.6 * h * w
    assert s.image.shape == (1, h, w) and 0 <= s.image.min() and s.image.max() <= 1
    assert s.gt_mask[s.point_prompt.y, s.point_prompt.x] == 1
    b = s.box_prompt
    assert s.gt_mask[:, : b.x0].sum() == 0 and s.gt_mask[:, b.x1:].sum() == 0
    assert s.gt_mask[: b.y0].sum() == 0 and s.gt_mask[b.y1:].sum() == 0
    # minimal: every edge row/column touches the mask
    assert s.gt_mask[b.y0, b.x0:b.x1].any() and s.gt_mask[b.y1 - 1, b.x0:b.x1].any()
    assert s.gt_mask[b.y0:b.y1, b.x0].any() and s.gt_mask[b.y0:b.y1, b.x1 - 1].any()


def test_sample_invariants_all():
    for i in range(200):
        _check_invariants(generate_sample(3, i))


def test_point_in_eroded_interior():
    for i in range(50):
        s = generate_sample(4, i)
        assert erode(s.gt_mask > 0)[s.point_prompt.y, s.point_prompt.x]


def test_contrast_and_noise():
    cfg = DataConfig()
    for i in range(30):
        s = generate_sample(5, i)
        fg = s.image[0][s.gt_mask > 0]
        bg = s.image[0][s.gt_mask == 0]
        # the noise is bounded, so the class means stay at least contrast - 2*noise apart
        assert abs(np.median(fg) - np.median(bg)) >= cfg.min_contrast - 2 * cfg.noise


def test_shape_distribution():
    from robustseg.data import SHAPES
    counts = Counter(generate_sample(11, i).shape for i in range(1000))
    for shape in SHAPES:
        assert counts[shape] >= 0.25 * 1000 / 3


def test_rasterize_pixel_centers():
    m = rasterize("rectangle", 32, 32, 16, 1.0, 0.0, 64)
    assert m.sum() == 16 * 16
    assert rasterize("ellipse", 32, 32, 20, 1.0, 0.0, 64).sum() == pytest.approx(np.pi * 100, rel=0.05)


def test_round_trip_bitwise(tmp_path):
    s = generate_sample(2, 3)
    save_sample(tmp_path / "s.smp", s)
    r = load_sample(tmp_path / "s.smp")
    assert r.id == s.id and r.shape == s.shape and r.point_prompt == s.point_prompt and r.box_prompt == s.box_prompt
    assert r.image.tobytes() == s.image.tobytes() and r.gt_mask.tobytes() == s.gt_mask.tobytes()


def test_truncated_file_rejected(tmp_path):
    s = generate_sample(2, 3)
    p = tmp_path / "s.smp"
    save_sample(p, s)
    data = p.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_sample(p)


def test_corrupted_shape_names_field(tmp_path):
    s = generate_sample(2, 3)
    p = tmp_path / "s.smp"
    meta = {"kind": "sample", "sample_format": 1, "id": s.id, "point": s.point_prompt.to_list(),
            "box": s.box_prompt.to_list()}
    p.write_bytes(encode_bundle(meta, {"image": s.image, "gt_mask": s.gt_mask[:-1]}))
    with pytest.raises(FormatError, match="shape"):
        load_sample(p)


def test_version_mismatch_rejected(tmp_path):
    s = generate_sample(2, 3)
    p = tmp_path / "s.smp"
    meta = {"kind": "sample", "sample_format": 99, "id": s.id, "point": s.point_prompt.to_list(),
            "box": s.box_prompt.to_list()}
    p.write_bytes(encode_bundle(meta, {"image": s.image, "gt_mask": s.gt_mask}))
    with pytest.raises(FormatError, match="format"):
        load_sample(p)


def test_load_split_matches_manifest(tmp_path):
    m = generate_dataset(tmp_path, 6, 20)
    val = load_split(tmp_path, "val")
    assert [s.id for s in val] == [e["id"] for e in m["samples"] if e["split"] == "val"]
    assert load_manifest(tmp_path)["config_hash"] == m["config_hash"]


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_manifest(tmp_path)
