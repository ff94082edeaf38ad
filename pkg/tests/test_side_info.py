import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from otsi.errors import InputError, InstanceError, ParseError
from otsi.side_info import (Correspondence, ForbiddenSet, SideInfoWarning, build_forbidden,
                            hard_assignment, load_correspondence, load_pairs_csv, pair_accuracy,
                            save_correspondence, save_pairs_csv, side_info_loss, subset_accuracy)


def forbidden_oracle(corr, n_x, n_y):
    """Cell-by-cell reading of the forbidden-set rule with exact fractions."""
    from fractions import Fraction
    cells = set()
    for sx, sy in corr.pairs:
        sx, sy = set(sx.tolist()), set(sy.tolist())
        p, q = Fraction(len(sx), n_x), Fraction(len(sy), n_y)
        for i in range(n_x):
            for j in range(n_y):
                if p <= q and i in sx and j not in sy:
                    cells.add((i, j))
                if q <= p and i not in sx and j in sy:
                    cells.add((i, j))
    return cells


def subset_accuracy_oracle(G, corr):
    num = sum(G[i, j] for sx, sy in corr.pairs for i in sx for j in sy)
    den = sum(min(len(sx) / G.shape[0], len(sy) / G.shape[1]) for sx, sy in corr.pairs)
    return min(num / den, 1.0)


@st.composite
def plans_and_corrs(draw, disjoint=False):
    n = draw(st.integers(1, 7))
    m = draw(st.integers(1, 7))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    G = rng.exponential(size=(n, m)) * (rng.uniform(size=(n, m)) < 0.7)
    if G.sum() == 0:
        G[0, 0] = 1.0
    # rescale to the uniform marginals; a sparsity pattern that cannot carry
    # them falls back to a dense plan
    for attempt in range(2):
        for _ in range(500):
            G *= (1.0 / n) / np.maximum(G.sum(1, keepdims=True), 1e-300)
            G *= (1.0 / m) / np.maximum(G.sum(0, keepdims=True), 1e-300)
        if np.abs(G.sum(1) - 1.0 / n).max() < 1e-12:
            break
        G = rng.exponential(size=(n, m))
    k = draw(st.integers(1, 3))
    pairs = []
    if disjoint:
        lx, ly = rng.integers(0, k, n), rng.integers(0, k, m)
        for c in range(k):
            sx, sy = np.flatnonzero(lx == c), np.flatnonzero(ly == c)
            if sx.size and sy.size:
                pairs.append((sx, sy))
        if not pairs:
            pairs.append(([0], [0]))
    else:
        for _ in range(k):
            sx = rng.choice(n, rng.integers(1, n + 1), replace=False)
            sy = rng.choice(m, rng.integers(1, m + 1), replace=False)
            pairs.append((sx, sy))
    return G, Correspondence(tuple(pairs))


# ---------------------------------------------------------- correspondence

def test_duplicate_indices_rejected():
    with pytest.raises(InputError):
        Correspondence((([0, 0], [1]),))
    with pytest.raises(InputError):
        Correspondence.from_pairs([(0, 1), (0, 2)])


def test_out_of_range_rejected():
    with pytest.raises(InputError):
        build_forbidden(Correspondence((([5], [0]),)), 3, 3)
    with pytest.raises(InputError):
        build_forbidden(Correspondence((([0], [-1]),)), 3, 3)


def test_from_labels_groups_by_class():
    c = Correspondence.from_labels([0, 1, 0, 2], [1, 0, 0])
    assert [(sx.tolist(), sy.tolist()) for sx, sy in c.pairs] == [([0, 2], [1, 2]), ([1], [0])]


def test_json_and_csv_round_trip(tmp_path):
    c = Correspondence((([0, 3], [1]), ([2], [0, 2])))
    save_correspondence(c, tmp_path / "c.json")
    back = load_correspondence(tmp_path / "c.json")
    assert [(a.tolist(), b.tolist()) for a, b in back.pairs] == [([0, 3], [1]), ([2], [0, 2])]
    save_pairs_csv([(0, 2), (4, 1)], tmp_path / "p.csv")
    assert load_pairs_csv(tmp_path / "p.csv") == [(0, 2), (4, 1)]


def test_malformed_files(tmp_path):
    (tmp_path / "bad.json").write_text('{"source": [1]}')
    with pytest.raises(ParseError):
        load_correspondence(tmp_path / "bad.json")
    (tmp_path / "bad.csv").write_text("source,target\n0,1\n2,x\n")
    with pytest.raises(ParseError, match="line 3"):
        load_pairs_csv(tmp_path / "bad.csv")


# --------------------------------------------------------------- forbidden

def test_no_pairs_gives_empty_set():
    assert len(build_forbidden(Correspondence(), 3, 4)) == 0


def test_equal_mass_uses_both_branches():
    forb = build_forbidden(Correspondence((([0, 1], [0, 1]),)), 4, 4)
    expect = {(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (3, 0), (2, 1), (3, 1)}
    assert set(map(tuple, forb.indices.tolist())) == expect


def test_smaller_side_is_constrained():
    forb = build_forbidden(Correspondence((([0], [0, 1, 2]),)), 4, 6)
    assert set(map(tuple, forb.indices.tolist())) == {(0, 3), (0, 4), (0, 5)}


def test_blocked_rows_warn():
    with pytest.warns(SideInfoWarning, match="rows"):
        forb = build_forbidden(Correspondence((([0], [0]), ([0], [1]))), 3, 3)
    assert forb.blocked_rows.tolist() == [0]


@given(plans_and_corrs())
def test_forbidden_matches_cellwise_oracle(case):
    G, corr = case
    n, m = G.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SideInfoWarning)
        forb = build_forbidden(corr, n, m)
    got = set(map(tuple, forb.indices.tolist()))
    assert got == forbidden_oracle(corr, n, m)
    # mask and index list agree exactly
    assert got == set(zip(*np.nonzero(forb.mask)))


@given(plans_and_corrs(), st.integers(0, 2 ** 31))
def test_forbidden_is_monotone(case, seed):
    G, corr = case
    n, m = G.shape
    rng = np.random.default_rng(seed)
    extra = (rng.choice(n, rng.integers(1, n + 1), replace=False),
             rng.choice(m, rng.integers(1, m + 1), replace=False))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SideInfoWarning)
        a = build_forbidden(corr, n, m).mask
        b = build_forbidden(Correspondence(corr.pairs + (extra,)), n, m).mask
    assert np.all(b[a])


# -------------------------------------------------------------------- loss

def test_loss_examples():
    G = np.full((2, 2), 0.25)
    assert side_info_loss(G, ForbiddenSet(np.zeros((2, 2), bool))) == 0.0
    one = np.zeros((2, 2), bool)
    one[0, 1] = True
    assert side_info_loss(G, ForbiddenSet(one)) == 0.0625
    assert side_info_loss(0.5 * np.eye(2), ForbiddenSet(~np.eye(2, dtype=bool))) == 0.0
    with pytest.raises(InstanceError):
        side_info_loss(np.zeros((3, 2)), ForbiddenSet(one))


@given(plans_and_corrs())
def test_loss_zero_iff_plan_vanishes_on_forbidden(case):
    G, corr = case
    n, m = G.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SideInfoWarning)
        forb = build_forbidden(corr, n, m)
    assert (side_info_loss(G, forb) == 0.0) == (not np.any(G[forb.mask]))
    H = np.where(forb.mask, 0.0, G)
    assert side_info_loss(H, forb) == 0.0


# ---------------------------------------------------------------- accuracy

def test_accuracy_extremes_and_hand_value():
    corr = Correspondence((([0, 1], [0, 1]), ([2, 3], [2, 3])))
    block = np.zeros((4, 4))
    block[:2, :2] = block[2:, 2:] = 1 / 8
    assert subset_accuracy(block, corr) == 1.0
    anti = np.zeros((4, 4))
    anti[:2, 2:] = anti[2:, :2] = 1 / 8
    assert subset_accuracy(anti, corr) == 0.0
    two = Correspondence((([0], [0]), ([1], [1])))
    assert subset_accuracy(np.full((2, 2), 0.25), two) == 0.5


def test_pair_accuracy_examples():
    n = 5
    diag = [(i, i) for i in range(n)]
    assert pair_accuracy(np.eye(n) / n, diag) == pytest.approx(1.0, abs=1e-15)
    assert pair_accuracy(np.fliplr(np.eye(4)) / 4, [(i, i) for i in range(4)]) == 0.0
    assert pair_accuracy(np.roll(np.eye(n), 1, axis=1) / n, diag) == 0.0
    assert pair_accuracy(np.full((n, n), 1 / n ** 2), diag) == pytest.approx(1 / n, abs=1e-15)
    with pytest.raises(InputError):
        pair_accuracy(np.eye(2) / 2, [(0, 0), (1, 0)])


def test_no_correspondence_is_an_error():
    with pytest.raises(InputError):
        subset_accuracy(np.eye(2) / 2, Correspondence())


@given(plans_and_corrs())
def test_accuracy_in_unit_interval_and_matches_oracle(case):
    G, corr = case
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SideInfoWarning)
        acc = subset_accuracy(G, corr)
    assert 0.0 <= acc <= 1.0
    assert acc == pytest.approx(subset_accuracy_oracle(G, corr), abs=1e-12)


@given(plans_and_corrs(disjoint=True))
def test_disjoint_subsets_need_no_clamp(case):
    G, corr = case
    num = sum(G[np.ix_(sx, sy)].sum() for sx, sy in corr.pairs)
    den = sum(min(len(sx) / G.shape[0], len(sy) / G.shape[1]) for sx, sy in corr.pairs)
    assert num <= den + 1e-9


def test_overlap_clamps_with_warning():
    # for a feasible plan every block is bounded by its min-marginal mass, so
    # only plans off the marginals (unconverged iterates) can exceed 1
    G = np.array([[0.6, 0.0], [0.0, 0.4]])
    corr = Correspondence((([0], [0]), ([0], [0])))
    with pytest.warns(SideInfoWarning, match="overlapping"):
        assert subset_accuracy(G, corr) == 1.0


@given(plans_and_corrs(), st.integers(0, 2 ** 31))
def test_permutation_equivariance(case, seed):
    G, corr = case
    n, m = G.shape
    rng = np.random.default_rng(seed)
    p, q = rng.permutation(n), rng.permutation(m)
    pinv, qinv = np.argsort(p), np.argsort(q)
    Gp = G[p][:, q]  # new row r holds old row p[r]
    corr_p = Correspondence(tuple((pinv[sx], qinv[sy]) for sx, sy in corr.pairs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SideInfoWarning)
        assert subset_accuracy(Gp, corr_p) == pytest.approx(subset_accuracy(G, corr), abs=1e-12)
        fa, fb = build_forbidden(corr, n, m), build_forbidden(corr_p, n, m)
    assert side_info_loss(Gp, fb) == pytest.approx(side_info_loss(G, fa), abs=1e-15)


# ------------------------------------------------------------------ argmax

def test_hard_assignment():
    np.testing.assert_array_equal(hard_assignment(np.eye(3) / 3), [0, 1, 2])
    assert hard_assignment(np.array([[0.1, 0.1, 0.3]]))[0] == 2
    assert hard_assignment(np.array([[0.2, 0.2]]))[0] == 0
