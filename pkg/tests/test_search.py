import json
from collections import Counter

import numpy as np
import pytest

from morreylab.laminate import RefinementSchedule
from morreylab.search import (REFINED_CERTIFIED, SUFFICIENTLY_SUSPICIOUS, SURVIVED_REFINEMENT, ConfigMismatch,
                              SearchConfig, TrialRecord, draw_amplitudes, draw_frequencies, draw_g, examine_suspicious,
                              format_table, read_log, read_timings, resume, run_search, summarize)


def small(**kw):
    base = dict(L=7, M_n=2, M_c=1, M_a=2, M_g=3, seed=5, resolution=512)
    base.update(kw)
    return SearchConfig(**base)


def test_deterministic_log(tmp_path):
    cfg = small()
    a = list(run_search(cfg, tmp_path / "a.jsonl"))
    b = list(run_search(cfg, tmp_path / "b.jsonl"))
    assert a == b
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(read_timings(tmp_path / "a.jsonl")) == len(a)
    assert [r.trial for r in a] == list(range(len(a)))


def test_substreams_are_independent_of_sample_counts():
    a, b = small(M_a=2), small(M_a=5, M_g=9)
    assert draw_frequencies(a, 1) == draw_frequencies(b, 1)
    ns = draw_frequencies(a, 0)
    assert draw_amplitudes(a, ns, 0, 0, 1) == draw_amplitudes(b, ns, 0, 0, 1)
    np.testing.assert_array_equal(draw_g(a, (1, 0, 1, 2)), draw_g(b, (1, 0, 1, 2)))
    assert not np.array_equal(draw_g(a, (1, 0, 1, 2)), draw_g(a, (1, 0, 1, 1)))


def test_resume_after_interruption_is_byte_identical(tmp_path):
    cfg = small()
    full = tmp_path / "full.jsonl"
    list(run_search(cfg, full))
    part = tmp_path / "part.jsonl"
    first = list(run_search(cfg, part, max_new_trials=4))
    assert len(first) == 4
    # a torn final line is dropped on resume
    with open(part, "a") as fh:
        fh.write('{"trial": 4, "ma')
    records = resume(part, cfg)
    assert part.read_bytes() == full.read_bytes()
    assert records == read_log(full)[1]


def test_resume_refuses_other_configuration(tmp_path):
    out = tmp_path / "log.jsonl"
    list(run_search(small(), out, max_new_trials=1))
    with pytest.raises(ConfigMismatch):
        resume(out, small(seed=6))
    with pytest.raises(ConfigMismatch):
        list(run_search(small(gamma=0.2), out))
    # a fresh run overwrites
    assert len(list(run_search(small(seed=6), out, resume=False))) > 0
    assert json.loads(out.read_text().splitlines()[0])["config"]["seed"] == 6


def test_empty_and_foreign_logs(tmp_path):
    assert read_log(tmp_path / "missing.jsonl") == (None, [])
    (tmp_path / "empty.jsonl").write_text("")
    assert read_log(tmp_path / "empty.jsonl") == (None, [])
    (tmp_path / "other.jsonl").write_text('{"format": "something"}\n')
    with pytest.raises(ValueError):
        read_log(tmp_path / "other.jsonl")
    assert list(run_search(small(M_n=0))) == []


def test_a_sufficient_hit_moves_to_the_next_measure():
    cfg = small(gamma=0.0, M_g=6, L=9)
    recs = list(run_search(cfg))
    per = Counter(r.measure for r in recs)
    assert all(c <= cfg.M_g for c in per.values())
    for mid in per:
        mine = [r for r in recs if r.measure == mid]
        hits = [r for r in mine if r.status == SUFFICIENTLY_SUSPICIOUS]
        if hits:
            assert mine[-1] is hits[0]
        else:
            assert len(mine) == cfg.M_g


def test_config_round_trip_and_validation():
    cfg = SearchConfig.table3(4, L=13)
    assert (cfg.M_n, cfg.M_c, cfg.M_a, cfg.M_g) == (7, 7, 20, 160)
    assert cfg.M_nu == 980
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        SearchConfig.from_dict({"L": 9, "colour": 1})
    with pytest.raises(ValueError):
        SearchConfig(L=8)
    with pytest.raises(ValueError):
        SearchConfig(gamma=2.0)
    assert [p.L for p in SearchConfig(L=13, refine_depth=2).schedule()] == [13, 25, 49]


def test_examine_and_summarize():
    cfg = small(L=9, M_n=3, M_g=4)
    recs = list(run_search(cfg))
    assert TrialRecord.from_dict(json.loads(recs[0].to_json())) == recs[0]
    untouched = examine_suspicious(recs, RefinementSchedule([cfg.grid_params()]))
    assert untouched == recs
    refined = examine_suspicious(recs, cfg.schedule(), max_iter=2000)
    for before, after in zip(recs, refined):
        if before.flagged:
            assert after.status in (REFINED_CERTIFIED, SURVIVED_REFINEMENT)
            assert after.refinement and after.refinement[0]["L"] == 17
        else:
            assert after == before
    rep = summarize(refined, 2, 3, timings=[0.5] * len(recs))
    assert rep["pairs"] == len(recs) and rep["measures"] == 6
    assert rep["suspicious_pairs"] == sum(r.flagged for r in recs)
    assert rep["refined_certified"] + rep["survived_refinement"] == rep["suspicious_pairs"]
    assert "wall time" in format_table(rep)
    empty = summarize([], 2, 3)
    assert empty["pairs"] == 0 and empty["max_margin"] is None
