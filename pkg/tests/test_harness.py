import csv

import numpy as np
import pytest

from procplan.harness import (CompareRow, SequenceConfig, Variant, backward_transfer, bench_planner, budget_curve,
                              cgc, codebook_usage_report, continual_run, crossover_budgets, csr, exe,
                              forgetting_rate, forward_transfer, read_episodes, recovery_rate, spl,
                              success_under_budget, summarize, write_episodes, write_phases, write_usage)
from procplan.inference import EpisodeResult
from procplan.model import ModelConfig, ProcedureLM


def ep(success=False, met=0, size=2, plan=0, opt=4, emitted=0, feasible=0, tid="t", ttype=None, hist=()):
    return EpisodeResult(tid, success, met, size, plan, plan, opt, emitted, feasible, 0.0, task_type=ttype,
                         chunk_hist=list(hist))


def test_cgc_fixture():
    assert cgc([ep(True, 2), ep(met=1), ep(met=0)]) == 50.0
    assert cgc([ep(met=1)]) == 50.0
    with pytest.raises(ValueError):
        cgc([])


def test_cgc_equals_csr_for_single_goal_tasks():
    r = [ep(True, 1, 1), ep(False, 0, 1), ep(True, 1, 1)]
    assert cgc(r) == csr(r)


def test_exe_fixtures():
    assert exe([ep(emitted=4, feasible=3)]) == 75.0
    assert exe([ep(emitted=2, feasible=0)]) == 0.0
    with pytest.raises(ValueError):
        exe([ep()])


def test_spl_fixtures():
    assert spl([ep(True, 2, plan=4, opt=4)]) == 1.0
    assert spl([ep(True, 2, plan=8, opt=4)]) == 0.5
    assert spl([ep(False, 1, plan=4, opt=4)]) == 0.0
    with pytest.raises(ValueError):
        spl([ep(opt=None)])


def test_summary_recomputes_from_log(tmp_path):
    r = [ep(True, 2, plan=5, opt=4, emitted=5, feasible=5, tid="a"), ep(met=1, emitted=3, feasible=1, tid="b")]
    write_episodes(tmp_path / "e.jsonl", r)
    assert summarize(read_episodes(tmp_path / "e.jsonl")) == summarize(r)


def test_recovery_fixture():
    # four tasks; after phase 1 only t3 had failed and it now succeeds
    prev = {"t0": True, "t1": True, "t2": True, "t3": False}
    now = {"t0": True, "t1": True, "t2": True, "t3": True}
    assert recovery_rate(prev, now) == (100.0, False)
    assert forgetting_rate(prev, now) == (0.0, False)
    assert forgetting_rate(prev, {**now, "t1": False}) == (100.0 / 3, False)
    assert recovery_rate({"a": True}, {"a": True}) == (0.0, True)


def test_transfer_formulas():
    assert forward_transfer([True, False], [False, False]) == 50.0
    assert forward_transfer([], []) == 0.0
    assert backward_transfer({"a": False, "b": True}, {"a": True, "b": True}) == 50.0
    assert backward_transfer({"a": True}, {}) == 0.0
    with pytest.raises(ValueError):
        forward_transfer([True], [])


def test_sequence_validation():
    s = SequenceConfig(["a", "b", "c"], [1, 3])
    assert s.phases() == [["a"], ["b", "c"]]
    with pytest.raises(ValueError):
        SequenceConfig(["a", "b"], [2, 2])
    with pytest.raises(ValueError):
        SequenceConfig(["a", "b"], [1])
    assert SequenceConfig(["a", "b"], [1, 2], reeval=[1]).reevaluates(1)


def test_stateless_continual_has_zero_transfer(small_suite, tmp_path):
    s = small_suite
    m = ProcedureLM(ModelConfig(vocab_size=len(s.vocab), n_layers=1, d_model=16, n_slots=2, n_heads=2,
                                book_size=8, unit_dim=8, max_len=512))
    m.book.seeded = True
    insts = {i.id: i for i in s.train[:4]}
    seq = SequenceConfig(list(insts), [2, 4])
    rep = continual_run(m, insts, s.domain, s.vocab, seq, Variant.stateless())
    assert rep.series("fwt") == [0.0, 0.0] and rep.series("bwt") == [0.0, 0.0]
    assert rep.phases[0].n_reeval == 0 and rep.phases[1].n_reeval == 2
    write_phases(tmp_path / "p.csv", rep.phases)
    rows = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(rows) == 2 and rows[0]["flags"] == "fr_undefined;rr_undefined"


def test_budget_curve_and_crossover():
    rows = [CompareRow("a", True, 0.1, True, 2.0, False), CompareRow("b", False, 0.1, True, 0.05, False),
            CompareRow("c", True, 0.1, False, 5.0, True)]
    assert success_under_budget(rows, 0.1) == (0.0, 100.0 / 3)  # strict inequality
    curve = budget_curve(rows, [0.01, 0.2, 3.0])
    assert [c["model_pct"] for c in curve] == [0.0, 200.0 / 3, 200.0 / 3]
    assert crossover_budgets(curve) == [0.2]


def test_bench_planner_rows(small_suite):
    rows = bench_planner(small_suite.train[:3], small_suite.domain)
    assert [r["solved"] for r in rows] == [1, 1, 1]
    assert [r["length"] for r in rows] == [i.meta["optimal_length"] for i in small_suite.train[:3]]


def test_usage_report(tmp_path):
    r = [ep(ttype="x", hist=[[1, 0], [1, 0]]), ep(ttype="y", hist=[[0, 3], [1, 0]]), ep(ttype="x", hist=[[]])]
    types, mat = codebook_usage_report(r)
    assert types == ["x", "y"]
    np.testing.assert_allclose(mat, [[1.0, 0.0], [0.25, 0.75]])
    write_usage(tmp_path / "u.csv", types, mat)
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "task_type,unit_0,unit_1"
    with pytest.raises(ValueError):
        codebook_usage_report([ep()])


def test_persistent_memory_variant_runs(small_suite):
    s = small_suite
    m = ProcedureLM(ModelConfig(vocab_size=len(s.vocab), n_layers=1, d_model=16, n_slots=2, n_heads=2,
                                book_size=8, unit_dim=8, max_len=512))
    m.book.seeded = True
    insts = {i.id: i for i in s.train[:3]}
    v = Variant.stateless()
    v.persist_memory = True
    rep = continual_run(m, insts, s.domain, s.vocab, SequenceConfig(list(insts), [1, 3]), v)
    assert [p.n_reeval for p in rep.phases] == [0, 1]
