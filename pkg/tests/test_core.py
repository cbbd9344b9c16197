import pytest

from kvswitch.core import BlockSpec, blocks_needed, elapsed, group_bytes


SPEC = BlockSpec()


def test_defaults():
    assert SPEC.block_size_tokens == 16
    assert SPEC.bytes_per_block == 131072


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        BlockSpec(block_size_tokens=0)
    with pytest.raises(ValueError):
        BlockSpec(bytes_per_block=0)


def test_blocks_needed():
    assert blocks_needed(1000, SPEC) == 63
    assert blocks_needed(0, SPEC) == 0
    assert blocks_needed(16, SPEC) == 1
    assert blocks_needed(17, SPEC) == 2


def test_blocks_needed_rejects_negative():
    with pytest.raises(ValueError):
        blocks_needed(-1, SPEC)


def test_group_bytes():
    assert group_bytes(1, SPEC) == 131072
    # 20 blocks is the typical coarse transfer unit
    assert group_bytes(20, SPEC) == 2621440
    assert group_bytes(0, SPEC) == 0


def test_blocks_needed_covers_and_is_monotone():
    for t in range(1, 4000):
        b = blocks_needed(t, SPEC)
        assert b * SPEC.block_size_tokens >= t
        assert blocks_needed(t - 1, SPEC) <= b


def test_group_bytes_linear():
    for a in (0, 1, 7, 60):
        for b in (0, 3, 20):
            assert group_bytes(a + b, SPEC) == group_bytes(a, SPEC) + group_bytes(b, SPEC)


def test_elapsed_never_negative():
    assert elapsed(10, 3) == 7
    assert elapsed(3, 10) == 0
