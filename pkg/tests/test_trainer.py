import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from duplexlm.checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from duplexlm.model import DlmConfig, build_model, loss, make_inputs
from duplexlm.synth import SynthConfig, synth_corpus
from duplexlm.trainer import (
    ABLATIONS,
    TrainConfig,
    ablation_flags,
    ablation_model_config,
    evaluate,
    evaluate_model,
    lr_at,
    prepare,
    round_half_away,
    run_ablation,
    sample_batch,
    split_dialogues,
    train,
)

SMALL = DlmConfig(vocab_size=20, n_layers=2, n_heads=2, embed_dim=16, context_len=33, n_cross_layers=1)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthConfig(vocab_size=20, seed=5), 12, 200)


def small_cfg(**kw):
    base = dict(model=SMALL, batch_size=4, window_frames=32, max_steps=12, eval_interval=6,
                split_fractions=(0.8, 0.1, 0.1), lr=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    cfg = small_cfg(max_steps=1000, warmup_frac=0.1, lr=1.0)
    assert lr_at(1, cfg) == pytest.approx(0.01)
    assert lr_at(100, cfg) == pytest.approx(1.0)
    assert lr_at(400, cfg) == pytest.approx(0.5)
    lrs = [lr_at(s, cfg) for s in range(100, 1001)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(window_frames=33)  # BOS takes one slot of the context
    with pytest.raises(ValueError):
        small_cfg(lr=-1)
    with pytest.raises(ValueError):
        small_cfg(split_fractions=(0.5, 0.1, 0.1))


def test_config_roundtrip():
    cfg = small_cfg(ablation_id=3)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back.model == cfg.model and back.lr == cfg.lr and back.ablation_id == 3


@pytest.mark.parametrize("aid", sorted(ABLATIONS))
def test_ablation_flags(aid):
    cfg = ablation_model_config(replace(SMALL, n_cross_layers=0), aid)
    flags = ablation_flags(cfg)
    row = ABLATIONS[aid]
    assert cfg.architecture == row["architecture"]
    assert flags["CA"] == row["cross"]
    assert flags["EP"] == row["ep"] and flags["DP"] == row["dp"]
    if row["dp"]:
        assert flags["delta"] == row["delta"]
    model = build_model(cfg)
    assert (getattr(model, "dur_head", None) is not None) == row["dp"]


def test_split_is_deterministic_and_disjoint(corpus):
    s1 = split_dialogues(corpus, (0.5, 0.25, 0.25), seed=1)
    s2 = split_dialogues(list(reversed(corpus)), (0.5, 0.25, 0.25), seed=1)
    ids = {k: [s.id for s in v] for k, v in s1.items()}
    assert ids == {k: [s.id for s in v] for k, v in s2.items()}
    flat = sum(ids.values(), [])
    assert sorted(flat) == sorted(s.id for s in corpus)
    assert len(ids["valid"]) == 3 and len(ids["test"]) == 3


def test_batches_keep_whole_dialogue_targets(corpus):
    data = prepare(corpus[:2])
    units, mask, durs = sample_batch(data, 16, 20, np.random.default_rng(0))
    # windows may start mid-run: the first frame is then not an edge
    assert not mask[:, :, 0].all()
    assert (durs[mask] >= 1).all() and (durs[~mask] == 0).all()


def test_round_half_away():
    x = torch.tensor([-2.5, -1.5, -0.4, 0.5, 1.5, 2.49])
    assert round_half_away(x).tolist() == [-3, -2, -0, 1, 2, 2]


def test_lr_zero_leaves_parameters_unchanged(corpus):
    cfg = small_cfg(lr=0.0)
    res = train(cfg, corpus)
    torch.manual_seed(cfg.seed)
    init = build_model(cfg.model)
    for (n, p), (_, q) in zip(res.model.named_parameters(), init.named_parameters()):
        assert torch.equal(p, q), n


def test_same_seed_gives_identical_checkpoints(corpus, tmp_path):
    cfg = small_cfg()
    train(cfg, corpus, tmp_path / "r1")
    train(cfg, corpus, tmp_path / "r2")
    train(replace(cfg, seed=1), corpus, tmp_path / "r3")
    a, b, c = ((tmp_path / r / "last.ckpt").read_bytes() for r in ("r1", "r2", "r3"))
    assert a == b and a != c
    for name in ("config.json", "metrics.jsonl", "train_log.jsonl", "best.ckpt"):
        assert (tmp_path / "r1" / name).exists()


def test_checkpoint_roundtrip(corpus, tmp_path):
    cfg = small_cfg()
    res = train(cfg, corpus, tmp_path / "run")
    ckpt = load_checkpoint(tmp_path / "run" / "last.ckpt")
    assert ckpt.step == cfg.max_steps
    assert TrainConfig.from_dict(ckpt.train_config).model == cfg.model
    model = ckpt.build_model()
    tok = make_inputs(torch.randint(0, 20, (2, 2, 30)), SMALL.bos_id)
    res.model.eval()
    assert torch.equal(model(tok).unit_logits, res.model(tok).unit_logits)

    opt = torch.optim.Adam(res.model.parameters())
    res.model(tok).unit_logits.sum().backward()
    opt.step()
    save_checkpoint(tmp_path / "x.ckpt", res.model, 1, opt)
    fresh = torch.optim.Adam(res.model.parameters())
    restore_optimizer(load_checkpoint(tmp_path / "x.ckpt"), res.model, fresh)
    for p in res.model.parameters():
        assert torch.equal(fresh.state[p]["exp_avg"], opt.state[p]["exp_avg"])


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"notackpt" + bytes(8))
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_evaluation_matches_loss():
    cfg = replace(SMALL, context_len=65)
    model = build_model(cfg, seed=3).eval()
    sample = synth_corpus(SynthConfig(vocab_size=20, seed=1), 1, 64)
    data = prepare(sample)
    rep = evaluate_model(model, data, window=64)
    u = torch.from_numpy(data[0].units[None])
    m = torch.from_numpy(data[0].edge_mask[None])
    d = torch.from_numpy(data[0].durations[None])
    with torch.no_grad():
        lb = loss(model(make_inputs(u, cfg.bos_id)), u, m, d, cfg)
    assert rep.edge_nll == pytest.approx(lb.l_eu.item(), abs=1e-6)
    assert rep.dur_mae == pytest.approx(lb.l_ed.item(), abs=1e-6)
    assert rep.n_edges == int(m.sum())


def test_random_init_nll_near_uniform():
    cfg = DlmConfig(n_layers=2, n_heads=4, embed_dim=64, context_len=257, n_cross_layers=2)
    model = build_model(cfg, seed=0)
    data = prepare(synth_corpus(SynthConfig(seed=2), 4, 500))
    rep = evaluate_model(model, data, window=256)
    assert rep.edge_nll == pytest.approx(math.log(101), rel=0.05)


def test_swapping_channels_leaves_loss_unchanged(corpus):
    model = build_model(SMALL, seed=4)
    data = prepare(corpus[:3])
    u, m, d = sample_batch(data, 4, 32, np.random.default_rng(1))
    out = model(make_inputs(u, SMALL.bos_id))
    out_s = model(make_inputs(u.flip(1), SMALL.bos_id))
    a = loss(out, u, m, d, SMALL)
    b = loss(out_s, u.flip(1), m.flip(1), d.flip(1), SMALL)
    assert a.total.item() == pytest.approx(b.total.item(), rel=1e-6)


def test_evaluate_checkpoint_and_vocab_check(corpus, tmp_path):
    train(small_cfg(), corpus, tmp_path / "run")
    rep = evaluate(tmp_path / "run" / "last.ckpt", corpus, split="test")
    assert rep.split == "test" and rep.n_edges > 0 and rep.dur_mae is not None
    big = synth_corpus(SynthConfig(vocab_size=50), 2, 50)
    with pytest.raises(ValueError):
        evaluate(tmp_path / "run" / "last.ckpt", big, split="all")


def test_training_reduces_loss(corpus):
    res = train(small_cfg(max_steps=400, eval_interval=400, eval_split="train", lr=5e-3), corpus)
    assert res.reports[-1].edge_nll < math.log(21) - 0.3


def test_empty_corpus_is_rejected():
    with pytest.raises(ValueError):
        train(small_cfg(), [])


def test_run_ablation_rows(corpus, tmp_path):
    base = small_cfg(max_steps=4, eval_interval=4)
    rows = run_ablation(base, corpus, ids=(0, 5), cross_sweep=(0, 2, 4), seeds=(0, 1), out_dir=tmp_path)
    # cross sweep counts above n_layers are skipped
    assert len(rows) == 2 * (2 + 2)
    assert {r["model"] for r in rows} >= {"MS-TLM", "DLM-5"}
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(rows)
