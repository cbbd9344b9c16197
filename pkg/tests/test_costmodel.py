import pytest

from kvswitch.costmodel import (
    InferParams,
    TransferParams,
    dispatch_yield_points,
    iteration_time,
    transfer_time,
)

P = TransferParams()
KB128 = 131072


def test_single_small_op():
    est = transfer_time([KB128], P)
    # exec = 2 + round(131072/32000) = 6; total = dispatch 12 + exec 6
    assert est.total == 18
    assert est.dispatch_busy == 12
    assert est.dispatch_fraction == pytest.approx(12 / 18)


def test_many_small_ops_are_dispatch_bound():
    est = transfer_time([KB128] * 100, P)
    assert est.total == 100 * 12 + 6
    assert est.dispatch_fraction >= 0.99


def test_consolidated_op_beats_split_ops():
    one = transfer_time([20 * KB128], P)
    twenty = transfer_time([KB128] * 20, P)
    assert one.total == 96  # 12 + (2 + 82)
    assert twenty.total == 246  # 20*12 + 6
    assert twenty.total / one.total == pytest.approx(2.5625)


def test_empty_batch():
    est = transfer_time([], P)
    assert est.total == 0
    assert est.dispatch_busy == 0
    assert est.dispatch_fraction == 0.0


def test_negative_size_rejected():
    with pytest.raises(ValueError):
        transfer_time([-1], P)


def test_total_monotone_in_op_count_and_size():
    prev = 0
    for n in range(1, 40):
        total = transfer_time([KB128] * n, P).total
        assert total >= prev
        prev = total
    prev = 0
    for size in range(0, 20 * KB128, KB128 // 2):
        total = transfer_time([size], P).total
        assert total >= prev
        prev = total


def test_dispatch_dominance_across_grid():
    # Small-op regime: exec well under dispatch cost, batches of >= 8 ops.
    for dispatch in (8, 12, 20):
        for size in (32768, 65536, KB128):
            p = TransferParams(dispatch_per_op=dispatch, bandwidth=32000)
            if p.exec_time(size) > 0.75 * dispatch:
                continue
            for n in (8, 16, 64, 256):
                est = transfer_time([size] * n, p)
                assert est.dispatch_fraction >= 0.90, (dispatch, size, n)


def test_consolidation_strictly_wins():
    for k in range(2, 65):
        split = transfer_time([KB128] * k, P).total
        merged = transfer_time([k * KB128], P).total
        assert merged < split, k


def test_iteration_time_examples():
    p = InferParams(decode_base=3000, decode_per_token=100, prefill_per_token=200)
    assert iteration_time(0, 0, p) == 3000
    assert iteration_time(0, 32, p) == 6200
    assert iteration_time(1000, 0, p) > iteration_time(0, 1000, p)


def test_infer_params_require_prefill_dominance():
    with pytest.raises(ValueError):
        InferParams(decode_per_token=50, prefill_per_token=50)


def test_yield_points():
    assert dispatch_yield_points(20, P) == [8, 16]
    assert dispatch_yield_points(8, P) == [8]
    assert dispatch_yield_points(5, P) == []
    assert dispatch_yield_points(0, P) == []


def test_yield_points_bound_queue_depth():
    points = [0] + dispatch_yield_points(1000, P) + [1000]
    for a, b in zip(points, points[1:]):
        assert b - a <= P.sync_batch
