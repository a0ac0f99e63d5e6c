import pytest
from hypothesis import given, settings, strategies as st

from tsclab.sim import DIRECTIONS, build_grid


def test_grid_3x4_counts():
    net = build_grid(3, 4, 30)
    assert net.n == 12
    assert len(net.entries) == 14
    assert len(net.intersections) == 12


def test_grid_1x1_counts():
    net = build_grid(1, 1, 30)
    assert net.n == 1
    assert len(net.entries) == 4


def test_grid_4x4_counts():
    net = build_grid(4, 4, 30)
    assert net.n == 16
    # one entry per boundary approach: 2*(rows+cols), enumerated explicitly
    assert len(net.entries) == 2 * (4 + 4)
    sides = [e.side for e in net.entries]
    assert sides.count("N") == sides.count("S") == 4
    assert sides.count("W") == sides.count("E") == 4


@pytest.mark.parametrize("rows,cols", [(0, 3), (3, 0), (-1, 2)])
def test_grid_rejects_bad_dims(rows, cols):
    with pytest.raises(ValueError):
        build_grid(rows, cols, 30)


def test_grid_rejects_bad_tau():
    with pytest.raises(ValueError):
        build_grid(2, 2, 0)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 6))
def test_grid_invariants(rows, cols):
    net = build_grid(rows, cols, 30)
    assert net.n == rows * cols
    assert len(net.entries) == 2 * (rows + cols)
    for it in net.intersections:
        degree = sum(1 for d in DIRECTIONS if it.neighbors[d] is not None)
        interior_r = 0 < it.row < rows - 1
        interior_c = 0 < it.col < cols - 1
        expected = 2 + (1 if interior_r else 0) + (1 if interior_c else 0)
        if rows == 1:
            expected -= 1
        if cols == 1:
            expected -= 1
        assert degree == expected
    # every link connects adjacent nodes or a boundary pair
    ids = {f"i{it.id}" for it in net.intersections}
    for link in net.links:
        if link.kind == "internal":
            assert link.src in ids and link.dst in ids
            a, b = int(link.src[1:]), int(link.dst[1:])
            ra, ca, rb, cb = a // cols, a % cols, b // cols, b % cols
            assert abs(ra - rb) + abs(ca - cb) == 1
        else:
            assert (link.src in ids) != (link.dst in ids)


def test_grid_deterministic():
    assert build_grid(3, 4, 30) == build_grid(3, 4, 30)


def test_neighbor_lists_match_topology():
    net = build_grid(2, 3, 30)
    nbl = net.neighbor_lists()
    assert nbl[0] == [1, 3]          # corner: E and S neighbors
    assert nbl[1] == [2, 4, 0]       # top edge: E, S, W
