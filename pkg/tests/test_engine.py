import json

import numpy as np
import pytest
import torch

from rgbtmae.data import PairDataset
from rgbtmae.engine import (TrainConfig, batch_indices, dump_config, init_state, load_config,
                            load_model, load_state, lr_at, make_optimizer, parse_kv,
                            run_pretraining, save_checkpoint, step_rng, train_step)
from rgbtmae.synthetic import SceneSpec, generate_pairs


@pytest.fixture(scope="module")
def tiny_ds():
    return PairDataset.from_pairs(p for _, p, _ in generate_pairs(SceneSpec(img_size=32, seed=9), 12))


def tiny_cfg(**kw):
    base = dict(preset="tiny", img_size=32, patch_size=8, epochs=3, batch_size=4, seed=5,
                mask_ratio=0.75, base_lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_parse_and_dump_roundtrip(tmp_path):
    cfg = tiny_cfg(masking="random", complementary=True)
    p = tmp_path / "c.txt"
    p.write_text("# comment\n" + dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p, {"seed": "9"}).seed == 9
    with pytest.raises(ValueError):
        parse_kv("no equals sign")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nonsense": "1"})
    with pytest.raises(ValueError):
        TrainConfig(masking="sideways")
    with pytest.raises(ValueError):
        TrainConfig(mask_ratio=1.0)


def test_lr_schedule_shape():
    cfg = TrainConfig(batch_size=256, base_lr=1e-3, warmup_frac=0.1)
    lrs = [lr_at(cfg, i, 100) for i in range(100)]
    assert lrs[9] == pytest.approx(1e-3)  # end of warmup reaches the peak
    assert all(a < b for a, b in zip(lrs[:9], lrs[1:10]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] == pytest.approx(0.0, abs=1e-15)
    assert lr_at(TrainConfig(batch_size=128, base_lr=1.5e-4, warmup_frac=0.0), 0, 10) \
        == pytest.approx(7.5e-5)


def test_no_decay_on_vectors_and_mask_tokens():
    st = init_state(tiny_cfg(), 12)
    names = {id(p): n for n, p in st.model.named_parameters()}
    no_decay = [names[id(p)] for p in st.optimizer.param_groups[1]["params"]]
    assert any(n.endswith("mask_token") for n in no_decay)
    assert all(p.ndim <= 1 or names[id(p)].endswith("mask_token")
               for p in st.optimizer.param_groups[1]["params"])
    assert st.optimizer.param_groups[0]["betas"] == (0.9, 0.95)


def test_step_rng_streams_are_distinct():
    a = step_rng(1, 2, "mask", 0).random()
    assert a == step_rng(1, 2, "mask", 0).random()
    assert a != step_rng(1, 2, "augment", 0).random()
    assert a != step_rng(1, 3, "mask", 0).random()


def test_batches_cover_each_epoch():
    cfg = tiny_cfg()
    idx = np.concatenate([batch_indices(cfg, 10, i) for i in range(3)])
    assert sorted(idx.tolist()) == list(range(10))


@pytest.mark.parametrize("mode", ["gmm_cmss", "random", "low_cmss", "high_cmss"])
def test_train_step_metrics(tiny_ds, mode):
    st = init_state(tiny_cfg(masking=mode), len(tiny_ds))
    st.iteration = 4  # past warmup
    st, m = train_step(st, [tiny_ds.pair(i) for i in range(4)])
    assert st.iteration == 5 and st.gmm.iterations_seen == 1
    for k in ("loss_rgb", "loss_thermal", "lr", "visible_cmss_rgb", "gmm", "phase"):
        assert k in m
    assert m["visible_rgb"] == 16 - round(16 * 0.75)
    json.dumps(m)


def test_complementary_masks_are_disjoint(tiny_ds, monkeypatch):
    import rgbtmae.engine as eng

    seen = []
    orig = eng._plans

    def spy(*a, **k):
        out = orig(*a, **k)
        seen.append(out)
        return out

    monkeypatch.setattr(eng, "_plans", spy)
    st = init_state(tiny_cfg(complementary=True), len(tiny_ds))
    st.iteration = 6
    train_step(st, [tiny_ds.pair(i) for i in range(4)])
    for r, t in zip(seen[0]["rgb"], seen[0]["thermal"]):
        assert not np.any(r.visible & t.visible)


def _lines(path):
    return path.read_text().splitlines()


def test_identical_seeds_identical_logs(tiny_ds, tmp_path):
    run_pretraining(tiny_cfg(), tiny_ds, tmp_path / "a")
    run_pretraining(tiny_cfg(), tiny_ds, tmp_path / "b")
    assert _lines(tmp_path / "a" / "metrics.jsonl") == _lines(tmp_path / "b" / "metrics.jsonl")
    run_pretraining(tiny_cfg(seed=6), tiny_ds, tmp_path / "c")
    assert _lines(tmp_path / "a" / "metrics.jsonl") != _lines(tmp_path / "c" / "metrics.jsonl")


def test_resume_reproduces_unbroken_run(tiny_ds, tmp_path):
    cfg = tiny_cfg(checkpoint_every=2, epochs=3)
    run_pretraining(cfg, tiny_ds, tmp_path / "full")
    full = _lines(tmp_path / "full" / "metrics.jsonl")
    assert len(full) == 9
    for k in (2, 4, 6, 8):
        ck = tmp_path / "full" / f"iter_{k:07d}.ckpt.npz"
        assert ck.is_file()
        out = tmp_path / f"resume{k}"
        run_pretraining(cfg, tiny_ds, out, resume=ck)
        assert _lines(out / "metrics.jsonl") == full[k:]
        a, _ = load_model(out / "final.ckpt.npz")
        b, _ = load_model(tmp_path / "full" / "final.ckpt.npz")
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)


def test_stop_and_continue(tiny_ds, tmp_path):
    cfg = tiny_cfg()
    ck = run_pretraining(cfg, tiny_ds, tmp_path / "part", stop_at=4)
    assert ck.name == "iter_0000004.ckpt.npz"
    run_pretraining(cfg, tiny_ds, tmp_path / "part", resume=ck)
    run_pretraining(cfg, tiny_ds, tmp_path / "whole")
    assert _lines(tmp_path / "part" / "metrics.jsonl") == _lines(tmp_path / "whole" / "metrics.jsonl")


def test_checkpoint_roundtrip(tiny_ds, tmp_path):
    st = init_state(tiny_cfg(), len(tiny_ds))
    st, _ = train_step(st, [tiny_ds.pair(i) for i in range(4)])
    p = save_checkpoint(st, tmp_path / "x.ckpt.npz")
    back = load_state(p)
    assert back.iteration == 1 and back.cfg == st.cfg
    np.testing.assert_array_equal(back.gmm.means, st.gmm.means)
    assert back.stats == st.stats
    for p1, p2 in zip(back.model.parameters(), st.model.parameters()):
        assert torch.equal(p1, p2)
    s1 = back.optimizer.state[next(back.model.parameters())]
    s2 = st.optimizer.state[next(st.model.parameters())]
    assert torch.equal(s1["exp_avg_sq"], s2["exp_avg_sq"])
    assert not list(tmp_path.glob("*.tmp"))


def test_loss_decreases_on_tiny_run(tiny_ds, tmp_path):
    run_pretraining(tiny_cfg(epochs=20, base_lr=3e-3), tiny_ds, tmp_path / "r")
    ms = [json.loads(l) for l in _lines(tmp_path / "r" / "metrics.jsonl")]
    first = np.mean([m["loss"] for m in ms[:3]])
    last = np.mean([m["loss"] for m in ms[-3:]])
    assert last < first


def test_empty_dataset_rejected(tmp_path):
    empty = PairDataset(np.zeros((0, 32, 32, 3), np.uint8), np.zeros((0, 32, 32, 1), np.uint8))
    with pytest.raises(ValueError):
        run_pretraining(tiny_cfg(), empty, tmp_path)
