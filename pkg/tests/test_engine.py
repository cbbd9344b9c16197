import pytest

from kvswitch.alloc import PoolConfig
from kvswitch.costmodel import iteration_time
from kvswitch.engine import (
    Engine,
    EngineConfig,
    ablation_modes,
    percentile,
    tail_percentile,
)
from kvswitch.scheduler import PriorityTrace, SchedulerConfig
from kvswitch.workload import Conversation, WorkloadConfig, generate


def small_cfg(**kw):
    defaults = dict(
        gpu_pool=PoolConfig(total_blocks=48, initial_group_blocks=20),
        trace=PriorityTrace(pattern="random", frequency=0.2, seed=1),
        ablation="full",
    )
    defaults.update(kw)
    return EngineConfig(**defaults)


def duel_conversations():
    return [
        Conversation(id=0, turns=[(320, 320)], arrival=0, think_time=0),
        Conversation(id=1, turns=[(320, 320)], arrival=1000, think_time=0),
    ]


# -- percentile --------------------------------------------------------------------


def test_percentile_nearest_rank():
    assert percentile(list(range(1, 101)), 0.95) == 95
    assert percentile([7], 0.5) == 7
    assert percentile([3, 1, 2], 0.5) == 2


def test_percentile_rejects_bad_input():
    with pytest.raises(ValueError):
        percentile([], 0.5)
    with pytest.raises(ValueError):
        percentile([1], 0.0)


def test_tail_percentile_takes_worst_boundary():
    effs = list(range(1, 101))
    assert tail_percentile(effs, 0.99) == 2
    assert tail_percentile(effs, 0.90) == 11
    assert tail_percentile(effs, 0.50) == 51
    assert tail_percentile([5], 0.999) == 5


# -- ablation modes ----------------------------------------------------------------------


def test_ablation_mode_definitions():
    modes = ablation_modes()
    assert set(modes) == {"baseline", "blockgroup", "blockgroup_reuse", "full"}
    assert not modes["baseline"].group_alloc
    assert not modes["baseline"].reuse
    assert not modes["baseline"].adaptive
    assert modes["blockgroup"].group_alloc and not modes["blockgroup"].reuse
    assert modes["blockgroup_reuse"].reuse and not modes["blockgroup_reuse"].adaptive
    assert modes["full"].group_alloc and modes["full"].reuse and modes["full"].adaptive


def test_baseline_forces_single_block_ops():
    cfg = small_cfg(ablation="baseline")
    report = Engine(cfg, duel_conversations()).run()
    assert report.avg_granularity_blocks == 1.0


# -- the analytic no-contention case ----------------------------------------------------------


def test_single_turn_no_contention():
    cfg = EngineConfig(
        gpu_pool=PoolConfig(total_blocks=1024),
        trace=PriorityTrace(frequency=0.0),
    )
    conv = Conversation(id=0, turns=[(16, 4)], arrival=0, think_time=0)
    report = Engine(cfg, [conv]).run()
    assert report.swap_in_ops + report.swap_out_ops == 0
    assert report.ttft_p99_us == iteration_time(16, 0, cfg.inference)
    assert report.iterations == 4  # prefill emits the first token, then 3 decodes
    assert report.total_tokens == report.expected_tokens == 4
    assert report.overhead_ratio == 0.0


# -- forced preemption -------------------------------------------------------------------------


def test_forced_preemption_swaps_and_invariants():
    cfg = small_cfg()
    eng = Engine(cfg, duel_conversations())
    eng.check_invariants = True
    report = eng.run()
    assert report.swap_out_ops > 0
    assert report.swap_in_ops > 0
    assert report.total_tokens == report.expected_tokens
    # Golden counts pinned from the first verified run of this configuration.
    assert report.iterations == 642
    assert report.swap_out_ops == 35


def test_token_conservation_and_causality_on_generated_workload():
    convs = generate(WorkloadConfig(num_conversations=12, seed=5, max_context_tokens=2048))
    cfg = EngineConfig(
        gpu_pool=PoolConfig(total_blocks=256, initial_group_blocks=60),
        trace=PriorityTrace(pattern="markov", frequency=0.04, seed=2),
    )
    eng = Engine(cfg, convs)
    eng.check_invariants = True
    report = eng.run()
    assert report.total_tokens == report.expected_tokens
    # Causality: no first token can beat its own prefill cost.
    min_prefill = iteration_time(1, 0, cfg.inference)
    assert all(t >= min_prefill for t in eng.ttft_samples)
    assert report.turns_completed == sum(len(c.turns) for c in convs)


def test_ample_memory_frequency_zero_never_preempts():
    convs = generate(WorkloadConfig(num_conversations=10, seed=3))
    cfg = EngineConfig(
        gpu_pool=PoolConfig(total_blocks=100_000, initial_group_blocks=60),
        trace=PriorityTrace(frequency=0.0),
    )
    report = Engine(cfg, convs).run()
    # Turn-end offloads still happen (multi-turn retention), but nothing is
    # ever preempted mid-turn, so swap-ins equal returning turns at most.
    returning_turns = sum(len(c.turns) - 1 for c in convs)
    assert report.swap_in_ops <= returning_turns * 4
    assert report.total_tokens == report.expected_tokens


def test_deterministic_replay():
    convs = generate(WorkloadConfig(num_conversations=15, seed=8, max_context_tokens=2048))
    cfg = EngineConfig(
        gpu_pool=PoolConfig(total_blocks=192, initial_group_blocks=40),
        trace=PriorityTrace(pattern="random", frequency=0.04, seed=9),
    )
    a = Engine(cfg, convs).run()
    b = Engine(cfg, convs).run()
    assert a.to_json() == b.to_json()


def test_recompute_preemption_mode():
    cfg = small_cfg(scheduler=SchedulerConfig(preemption_mode="recompute"))
    report = Engine(cfg, duel_conversations()).run()
    assert report.swap_out_ops == 0  # recompute drops KV, no D2H traffic
    assert report.stall_recompute_us > 0
    assert report.total_tokens == report.expected_tokens


def test_unbounded_cpu_swap_out_equals_increments():
    # With an effectively infinite CPU store, cumulative swap-out volume
    # telescopes to the per-turn increments alone.
    convs = generate(WorkloadConfig(num_conversations=8, seed=13, max_context_tokens=2048))
    cfg = EngineConfig(
        gpu_pool=PoolConfig(total_blocks=160, initial_group_blocks=40),
        cpu_pool_blocks=10**6,
        trace=PriorityTrace(pattern="random", frequency=0.04, seed=4),
        ablation="full",
    )
    eng = Engine(cfg, convs)
    report = eng.run()
    from kvswitch.core import blocks_needed

    expected = 0
    for conv in convs:
        ctx = 0
        prev_blocks = 0
        for tin, tout in conv.turns[:-1]:  # last turn is dropped, not offloaded
            ctx += tin + tout
            blocks = blocks_needed(ctx, cfg.block)
            expected += blocks - prev_blocks
            prev_blocks = blocks
    # Preempted-then-resumed requests replay the same telescoping sums, and the
    # final turn of each conversation swaps nothing; totals must match exactly.
    assert report.swap_out_blocks == expected


def test_report_serialization_round_trip():
    cfg = small_cfg()
    report = Engine(cfg, duel_conversations()).run()
    as_json = report.to_json()
    assert '"overhead_ratio"' in as_json
    csv = report.to_csv()
    assert csv.startswith("metric,value")
    assert "ttft_p99_us" in csv
