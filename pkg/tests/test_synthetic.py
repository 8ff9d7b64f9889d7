import json

import numpy as np
import pytest
import torch

from rgbtmae.cmss import cmss_from_arrays
from rgbtmae.data import InputNorm, patch_labels, to_tensors
from rgbtmae.model import PRESETS, build_model
from rgbtmae.synthetic import SceneSpec, generate_corpus, generate_pairs


def _maps(pairs, seed=0):
    m = build_model(PRESETS["desk"], seed)
    rgb, th = to_tensors(np.stack([p.rgb for p in pairs]), np.stack([p.thermal for p in pairs]),
                         InputNorm())
    with torch.no_grad():
        er = m.embed(m.patchify(rgb)).double().numpy()
        et = m.embed(m.patchify(th)).double().numpy()
    return [cmss_from_arrays(a, b) for a, b in zip(er, et)]


def test_same_spec_same_pairs():
    a = generate_pairs(SceneSpec(seed=3), 5)
    b = generate_pairs(SceneSpec(seed=3), 5)
    for (sa, pa, _), (sb, pb, _) in zip(a, b):
        assert sa == sb
        assert np.array_equal(pa.rgb, pb.rgb) and np.array_equal(pa.thermal, pb.thermal)
    c = generate_pairs(SceneSpec(seed=4), 1)
    assert not np.array_equal(a[0][1].rgb, c[0][1].rgb)


def test_corpus_files_byte_identical(tmp_path):
    generate_corpus(SceneSpec(seed=2), 3, tmp_path / "a")
    generate_corpus(SceneSpec(seed=2), 3, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    meta = [json.loads(l) for l in (tmp_path / "a" / "meta.jsonl").read_text().splitlines()]
    assert len(meta) == 3 and {"stem", "source_id", "object_fraction"} <= set(meta[0])


def test_video_stems_and_sources():
    out = generate_pairs(SceneSpec(frames_per_sequence=3, n_sources=2), 7)
    stems = [s for s, _, _ in out]
    assert stems[:4] == ["src0_00000_f0000", "src0_00000_f0001", "src0_00000_f0002",
                         "src1_00001_f0000"]
    assert len(out) == 7


def test_unknown_spec_key():
    with pytest.raises(ValueError):
        SceneSpec.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        generate_pairs(SceneSpec(), 0)


def test_flat_scene_has_uniformly_high_raw_cmss():
    flat = generate_pairs(SceneSpec(objects_min=0, objects_max=0, seed=5), 1)[0][1]
    busy = generate_pairs(SceneSpec(seed=5), 8)
    assert not flat.object_mask.any()
    m_flat = _maps([flat])[0]
    obj = []
    for (_, p, _), m in zip(busy, _maps([b[1] for b in busy])):
        lab = patch_labels(p.object_mask, 8)
        if lab.any():
            obj.append(m.raw_values[lab].mean())
    # every flat-scene patch scores above the typical object patch
    assert m_flat.raw_values.min() > np.median(obj)


def test_object_patches_score_lower():
    pairs = [p for _, p, _ in generate_pairs(SceneSpec(seed=21), 60)]
    wins = total = 0
    for p, m in zip(pairs, _maps(pairs)):
        lab = patch_labels(p.object_mask, 8)
        if lab.any() and (~lab).any():
            total += 1
            wins += m.values[lab].mean() < m.values[~lab].mean()
    assert total > 50 and wins / total >= 0.95


def test_low_quality_pairs_are_marked():
    out = generate_pairs(SceneSpec(low_quality_fraction=1.0), 2)
    assert all(m["low_quality"] for _, _, m in out)
