import numpy as np
import pytest

from procplan import checkpoint as ckpt
from procplan.encoding import EOS, decode_plan
from procplan.model import ModelConfig, ProcedureLM
from procplan.planner import Unsolvable
from procplan.training import (TrainRunConfig, Trainer, dumps_dataset, generate_dataset, load_dataset, load_model,
                               loads_dataset, save_dataset)
from procplan.world import apply


def tiny_cfg(vocab_size, **kw):
    base = dict(n_layers=1, d_model=16, n_slots=2, n_heads=2, book_size=8, unit_dim=8, max_len=512)
    return ModelConfig(vocab_size=vocab_size, **{**base, **kw})


@pytest.fixture(scope="module")
def data(small_suite):
    s = small_suite
    return generate_dataset(s.domain, s.train[:4], s.vocab)


def test_dataset_targets_replay_to_goal(small_suite, data):
    s = small_suite
    for inst, ex in zip(s.train, data):
        assert ex.target[-1] == EOS
        state = inst.init
        actions, failure = decode_plan(ex.target, s.vocab, s.domain, inst.objects)
        assert failure is None
        for a in actions:
            state = apply(state, a)
        assert inst.goal <= state.atoms


def test_dataset_bytes_deterministic(small_suite, data, tmp_path):
    s = small_suite
    again = generate_dataset(s.domain, s.train[:4], s.vocab)
    assert dumps_dataset(again) == dumps_dataset(data)
    save_dataset(tmp_path / "d.bin", data)
    assert load_dataset(tmp_path / "d.bin") == data
    assert loads_dataset(dumps_dataset(data)) == data


def test_closed_format_one_example_per_step(small_suite):
    s = small_suite
    inst = s.train[0]
    ex = generate_dataset(s.domain, [inst], s.vocab, fmt="closed")
    assert len(ex) == inst.meta["optimal_length"]
    assert [e.instance_id for e in ex] == [f"{inst.id}#{t}" for t in range(len(ex))]
    assert all(e.target.count(EOS) == 1 for e in ex)


def test_planner_failure_propagates(small_suite):
    s = small_suite
    with pytest.raises(Unsolvable):
        generate_dataset(s.domain, s.train[:1], s.vocab, max_depth=1)


def test_cosine_schedule():
    cfg = TrainRunConfig(lr=1.0, schedule="cosine", warmup_steps=4)
    assert cfg.lr_at(0, 100) == pytest.approx(0.25)
    assert cfg.lr_at(3, 100) == pytest.approx(1.0)
    assert cfg.lr_at(100, 100) == pytest.approx(0.0, abs=1e-12)
    assert TrainRunConfig(lr=0.5).lr_at(50, 100) == 0.5
    with pytest.raises(ValueError):
        TrainRunConfig(batch=2)


def test_vocab_mismatch_rejected(small_suite):
    with pytest.raises(ValueError):
        Trainer(ProcedureLM(tiny_cfg(len(small_suite.vocab) + 1)), TrainRunConfig(), len(small_suite.vocab))


def test_loss_falls_and_log_written(small_suite, data, tmp_path):
    model = ProcedureLM(tiny_cfg(len(small_suite.vocab)))
    tr = Trainer(model, TrainRunConfig(epochs=6, lr=3e-3))
    log = tr.run(data, tmp_path / "log.csv")
    assert log[-1]["nll"] < log[0]["nll"]
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,nll,vq_loss,book_util,train_csr_probe" and len(rows) == 7
    assert all(0.0 < r["book_util"] <= 1.0 for r in log)


def test_no_book_trains_without_vq(small_suite, data):
    tr = Trainer(ProcedureLM(tiny_cfg(len(small_suite.vocab), use_book=False)), TrainRunConfig(epochs=1))
    log = tr.run(data)
    assert log[0]["vq_loss"] == 0.0 and log[0]["book_util"] == 0.0


def _final_bytes(tr):
    return ckpt.dumps(*tr.state())


def test_resume_matches_uninterrupted(small_suite, data, tmp_path):
    cfg = TrainRunConfig(epochs=2, lr=3e-3, schedule="cosine", warmup_steps=2)
    mcfg = tiny_cfg(len(small_suite.vocab))
    full = Trainer(ProcedureLM(mcfg), cfg)
    full.run(data)
    part = Trainer(ProcedureLM(mcfg), cfg)
    part.run(data, ckpt_path=tmp_path / "p.ckpt", stop_after=5)  # stops mid-epoch 2
    resumed = Trainer.load(tmp_path / "p.ckpt", mcfg)
    assert (resumed.epoch, resumed.index) == (1, 1)
    resumed.run(data)
    assert _final_bytes(resumed) == _final_bytes(full)
    assert resumed.log == full.log


def test_same_seed_same_bytes(small_suite, data):
    cfg = TrainRunConfig(epochs=1, lr=3e-3)
    mcfg = tiny_cfg(len(small_suite.vocab))
    a, b = Trainer(ProcedureLM(mcfg), cfg), Trainer(ProcedureLM(mcfg), cfg)
    a.run(data)
    b.run(data)
    assert _final_bytes(a) == _final_bytes(b)
    c = Trainer(ProcedureLM(tiny_cfg(len(small_suite.vocab), seed=1)), cfg)
    c.run(data)
    assert _final_bytes(c) != _final_bytes(a)


def test_load_model_checks_config(small_suite, data, tmp_path):
    mcfg = tiny_cfg(len(small_suite.vocab))
    tr = Trainer(ProcedureLM(mcfg), TrainRunConfig(epochs=1))
    tr.run(data, ckpt_path=tmp_path / "m.ckpt")
    m = load_model(tmp_path / "m.ckpt", mcfg)
    for k in m.params:
        assert m.params[k].data.tobytes() == tr.model.params[k].data.tobytes()
    with pytest.raises(ckpt.ConfigMismatch):
        load_model(tmp_path / "m.ckpt", tiny_cfg(len(small_suite.vocab), d_model=32))
