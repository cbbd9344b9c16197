import numpy as np
import pytest

from kvswitch.workload import Conversation, LengthDist, WorkloadConfig, generate, ingest, write_trace


def test_mean_turns_converges():
    cfg = WorkloadConfig(num_conversations=10_000, seed=7)
    convs = generate(cfg)
    mean_turns = np.mean([len(c.turns) for c in convs])
    assert abs(mean_turns - 5.5) < 0.2


def test_mean_interarrival_converges():
    cfg = WorkloadConfig(num_conversations=1000, arrival_rate_per_s=1.0, seed=11)
    convs = generate(cfg)
    arrivals = np.array([c.arrival for c in convs])
    gaps = np.diff(arrivals) / 1e6
    assert abs(np.mean(gaps) - 1.0) < 0.1


def test_single_conversation():
    cfg = WorkloadConfig(num_conversations=1, seed=3)
    convs = generate(cfg)
    assert len(convs) == 1
    assert convs[0].arrival >= 0
    assert len(convs[0].turns) >= 1


def test_deterministic_under_seed():
    a = generate(WorkloadConfig(num_conversations=50, seed=21))
    b = generate(WorkloadConfig(num_conversations=50, seed=21))
    assert [(c.id, c.arrival, c.turns, c.think_time) for c in a] == [
        (c.id, c.arrival, c.turns, c.think_time) for c in b
    ]
    c = generate(WorkloadConfig(num_conversations=50, seed=22))
    assert a[0].turns != c[0].turns or a[0].arrival != c[0].arrival


def test_length_caps_respected():
    cfg = WorkloadConfig(
        num_conversations=500,
        input_tokens=LengthDist(median=100, sigma=2.0, max_tokens=256),
        output_tokens=LengthDist(median=100, sigma=2.0, max_tokens=128),
        seed=5,
    )
    for conv in generate(cfg):
        for tin, tout in conv.turns:
            assert 1 <= tin <= 256
            assert 1 <= tout <= 128


def test_zero_variance_allowed_zero_mean_rejected():
    cfg = WorkloadConfig(
        num_conversations=10,
        input_tokens=LengthDist(median=64, sigma=0.0, max_tokens=1024),
        seed=1,
    )
    convs = generate(cfg)
    assert all(tin == 64 for c in convs for tin, _ in c.turns)
    with pytest.raises(ValueError):
        WorkloadConfig(arrival_rate_per_s=0.0)
    with pytest.raises(ValueError):
        LengthDist(median=0.0, sigma=1.0, max_tokens=10)


def test_roundtrip_identity(tmp_path):
    convs = generate(WorkloadConfig(num_conversations=30, seed=9))
    path = tmp_path / "trace.jsonl"
    write_trace(convs, path)
    back = ingest(path)
    assert len(back) == len(convs)
    for a, b in zip(convs, back):
        assert (a.id, a.arrival, a.turns, a.think_time) == (b.id, b.arrival, b.turns, b.think_time)


def test_ingest_valid_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(
        '{"id": 0, "arrival_us": 0, "turns": [{"in": 5, "out": 6}], "think_us": 100}\n'
        '{"id": 1, "arrival_us": 50, "turns": [{"in": 2, "out": 3}, {"in": 4, "out": 1}], "think_us": 0}\n'
    )
    convs = ingest(path)
    assert len(convs) == 2
    assert convs[1].turns == [(2, 3), (4, 1)]


def test_ingest_reports_bad_line_number(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(
        '{"id": 0, "arrival_us": 0, "turns": [{"in": 5, "out": 6}], "think_us": 100}\n'
        '{"id": 1, "arrival_us": 50, "think_us": 0}\n'
    )
    with pytest.raises(ValueError, match="line 2"):
        ingest(path)


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text("")
    assert ingest(path) == []


def test_conversation_invariants():
    with pytest.raises(ValueError):
        Conversation(id=0, turns=[], arrival=0, think_time=0)
    with pytest.raises(ValueError):
        Conversation(id=0, turns=[(0, 5)], arrival=0, think_time=0)
