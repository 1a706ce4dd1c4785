"""Binary regression trees, tree-ensemble prior, and the Metropolis-Hastings
backfitting sweep.

Trees store nodes in parallel lists indexed by node id (slot 0 is the root,
freed slots are recycled). Decision rules are ``u[k] <= c`` with cut values
drawn from per-column quantile grids; rule legality is tracked in grid-index
space, so a proposal can never create a logically empty leaf, and proposals
that would strand a leaf with zero training rows are rejected outright.

The structure prior splits a depth-``d`` node with probability
``alpha * (1 + d)**-beta``; a node with no legal cut is a forced leaf. Leaf
values carry a Normal(0, zeta^2 / (4 J k^2)) prior, integrated out in closed
form for the acceptance ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

# proposal mixture (grow, prune, change, swap)
MOVE_GROW, MOVE_PRUNE, MOVE_CHANGE, MOVE_SWAP = "grow", "prune", "change", "swap"
MOVE_PROBS = {MOVE_GROW: 0.25, MOVE_PRUNE: 0.25, MOVE_CHANGE: 0.40, MOVE_SWAP: 0.10}
_MOVE_EDGES = (0.25, 0.50, 0.90)  # cumulative, swap takes the rest


@dataclass
class ForestPrior:
    """Tree-ensemble prior: split penalties, tree count, node-value scale."""

    alpha: float = 0.95
    beta: float = 2.0
    n_trees: int = 200
    k: float = 2.0
    zeta: float | None = None            # 4 * sigma_aft, set from the response fit
    grids: list[np.ndarray] | None = None  # per predictor column, includes the arm column

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.k <= 0:
            raise ConfigError(f"k must be > 0, got {self.k}")
        if self.zeta is not None and self.zeta <= 0:
            raise ConfigError(f"zeta must be > 0, got {self.zeta}")

    @property
    def sigma_mu2(self) -> float:
        """Leaf-value prior variance zeta^2 / (4 J k^2)."""
        if self.zeta is None:
            raise ConfigError("zeta is unset; it is derived from the response-scale fit")
        return self.zeta ** 2 / (4.0 * self.n_trees * self.k ** 2)

    def resolved(self, zeta: float, grids: list[np.ndarray]) -> "ForestPrior":
        return replace(self, zeta=zeta, grids=grids)


def split_prob(depth: int, prior: ForestPrior) -> float:
    """Probability that a node at the given depth splits: alpha*(1+depth)^-beta."""
    if depth < 0:
        raise ConfigError(f"depth must be >= 0, got {depth}")
    return prior.alpha * (1.0 + depth) ** (-prior.beta)


def leaf_log_marginal(residual_sum: float, residual_sq_sum: float, count: int,
                      sigma: float, prior: ForestPrior) -> float:
    """Log of the leaf marginal likelihood with the node-value prior integrated out.

    ``log ∫ prod_i N(r_i; mu, sigma^2) N(mu; 0, sigma_mu^2) dmu`` evaluated
    from the sufficient statistics (sum, sum of squares, count).
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    s2 = sigma * sigma
    sm2 = prior.sigma_mu2
    denom = s2 + count * sm2
    return (-0.5 * count * math.log(2.0 * math.pi * s2)
            - residual_sq_sum / (2.0 * s2)
            + 0.5 * math.log(s2 / denom)
            + sm2 * residual_sum ** 2 / (2.0 * s2 * denom))


def _collapsed_terms(sums: np.ndarray, counts: np.ndarray, s2: float, sm2: float) -> float:
    # leaf_log_marginal minus the pieces that are invariant under re-partitioning
    # a fixed row set: -(n/2) log(2 pi s2) and -sum(r^2)/(2 s2)
    denom = s2 + counts * sm2
    return float(np.sum(0.5 * np.log(s2 / denom) + sm2 * sums ** 2 / (2.0 * s2 * denom)))


class TreeWorkspace:
    """Shared per-chain view of the predictor matrix and split grids."""

    def __init__(self, U: np.ndarray, grids: list[np.ndarray]):
        U = np.asarray(U, dtype=float)
        if U.ndim != 2:
            raise ConfigError("predictor matrix must be 2-D")
        if len(grids) != U.shape[1]:
            raise ConfigError("one split grid per predictor column is required")
        self.U = np.ascontiguousarray(U)
        self.cols = [np.ascontiguousarray(U[:, k]) for k in range(U.shape[1])]
        self.grids = [np.asarray(g, dtype=float) for g in grids]
        self.n, self.p = U.shape
        self.splittable_cols = [k for k, g in enumerate(self.grids) if g.size >= 1]


class Tree:
    """One binary decision tree bound to a workspace.

    Node fields live in parallel lists; ``var[v] == -1`` marks a leaf.
    ``leaf_of_row`` maps every training row to its leaf node id and is kept
    consistent by every structural operation.
    """

    __slots__ = ("ws", "var", "cut_idx", "left", "right", "parent", "depth",
                 "values", "leaf_ids", "internal_ids", "leaf_of_row", "free")

    def __init__(self, ws: TreeWorkspace):
        self.ws = ws
        self.var = [-1]
        self.cut_idx = [-1]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]
        self.depth = [0]
        self.values = np.zeros(1)
        self.leaf_ids = [0]
        self.internal_ids: list[int] = []
        self.leaf_of_row = np.zeros(ws.n, dtype=np.int32)
        self.free: list[int] = []

    # -- structure -----------------------------------------------------

    def copy(self) -> "Tree":
        t = Tree.__new__(Tree)
        t.ws = self.ws
        t.var = self.var.copy()
        t.cut_idx = self.cut_idx.copy()
        t.left = self.left.copy()
        t.right = self.right.copy()
        t.parent = self.parent.copy()
        t.depth = self.depth.copy()
        t.values = self.values.copy()
        t.leaf_ids = self.leaf_ids.copy()
        t.internal_ids = self.internal_ids.copy()
        t.leaf_of_row = self.leaf_of_row.copy()
        t.free = self.free.copy()
        return t

    def is_leaf(self, v: int) -> bool:
        return self.var[v] < 0

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    def _alloc(self) -> int:
        if self.free:
            return self.free.pop()
        self.var.append(-1)
        self.cut_idx.append(-1)
        self.left.append(-1)
        self.right.append(-1)
        self.parent.append(-1)
        self.depth.append(0)
        if len(self.var) > self.values.shape[0]:
            self.values = np.append(self.values, 0.0)
        return len(self.var) - 1

    def grow_leaf(self, leaf: int, var: int, cut_idx: int, rows: np.ndarray,
                  go_left: np.ndarray) -> tuple[int, int]:
        """Split ``leaf`` on (var, cut); rows/go_left give the child partition."""
        lid, rid = self._alloc(), self._alloc()
        d = self.depth[leaf] + 1
        for nid in (lid, rid):
            self.var[nid] = -1
            self.cut_idx[nid] = -1
            self.left[nid] = self.right[nid] = -1
            self.parent[nid] = leaf
            self.depth[nid] = d
            self.values[nid] = 0.0
        self.var[leaf] = var
        self.cut_idx[leaf] = cut_idx
        self.left[leaf], self.right[leaf] = lid, rid
        self.leaf_ids.remove(leaf)
        self.leaf_ids.extend((lid, rid))
        self.internal_ids.append(leaf)
        self.leaf_of_row[rows[go_left]] = lid
        self.leaf_of_row[rows[~go_left]] = rid
        return lid, rid

    def prune_node(self, v: int, rows_mask: np.ndarray) -> None:
        """Collapse an internal node whose children are both leaves."""
        lid, rid = self.left[v], self.right[v]
        self.leaf_ids.remove(lid)
        self.leaf_ids.remove(rid)
        self.free.extend((rid, lid))
        self.var[v] = -1
        self.cut_idx[v] = -1
        self.left[v] = self.right[v] = -1
        self.internal_ids.remove(v)
        self.leaf_ids.append(v)
        self.leaf_of_row[rows_mask] = v

    def prunable_nodes(self) -> list[int]:
        return [v for v in self.internal_ids
                if self.var[self.left[v]] < 0 and self.var[self.right[v]] < 0]

    def leaves_under(self, v: int) -> list[int]:
        out, stack = [], [v]
        while stack:
            w = stack.pop()
            if self.var[w] < 0:
                out.append(w)
            else:
                stack.append(self.left[w])
                stack.append(self.right[w])
        return out

    def uses_column(self, k: int) -> bool:
        return any(self.var[v] == k for v in self.internal_ids)

    # -- rule legality ---------------------------------------------------

    def intervals_at(self, v: int) -> dict[int, tuple[int, int]]:
        """Legal cut-index interval [lo, hi) per column constrained above ``v``."""
        iv: dict[int, tuple[int, int]] = {}
        child, node = v, self.parent[v]
        while node >= 0:
            k, ci = self.var[node], self.cut_idx[node]
            lo, hi = iv.get(k, (0, self.ws.grids[k].size))
            if child == self.left[node]:
                hi = min(hi, ci)
            else:
                lo = max(lo, ci + 1)
            iv[k] = (lo, hi)
            child, node = node, self.parent[node]
        return iv

    def legal_columns(self, intervals: dict[int, tuple[int, int]]) -> list[tuple[int, int, int]]:
        """Columns with at least one legal cut, as (col, lo, hi) triples."""
        out = []
        for k in self.ws.splittable_cols:
            lo, hi = intervals.get(k, (0, self.ws.grids[k].size))
            if hi > lo:
                out.append((k, lo, hi))
        return out

    # -- routing and prediction -------------------------------------------

    def route_rows(self, start: int, rows: np.ndarray, out: np.ndarray) -> None:
        """Send ``rows`` down from ``start``, writing leaf ids into ``out[rows]``."""
        cols, grids = self.ws.cols, self.ws.grids
        stack = [(start, rows)]
        while stack:
            v, rr = stack.pop()
            if self.var[v] < 0:
                out[rr] = v
                continue
            c = grids[self.var[v]][self.cut_idx[v]]
            m = cols[self.var[v]][rr] <= c
            stack.append((self.left[v], rr[m]))
            stack.append((self.right[v], rr[~m]))

    def assign_with_columns(self, cols: list[np.ndarray], rows: np.ndarray) -> np.ndarray:
        """Leaf assignment of ``rows`` under alternative column values."""
        out = np.empty(rows.shape[0], dtype=np.int32)
        grids = self.ws.grids
        stack = [(0, np.arange(rows.shape[0]))]
        while stack:
            v, pos = stack.pop()
            if self.var[v] < 0:
                out[pos] = v
                continue
            c = grids[self.var[v]][self.cut_idx[v]]
            m = cols[self.var[v]][rows[pos]] <= c
            stack.append((self.left[v], pos[m]))
            stack.append((self.right[v], pos[~m]))
        return out

    def fit_vector(self) -> np.ndarray:
        return self.values[self.leaf_of_row]

    def validate_subtree(self, v: int) -> tuple[bool, float]:
        """Check rule legality below ``v``; return (ok, rule log-prior sum).

        The rule log-prior of an internal node is
        ``-log(#legal columns) - log(#legal cuts of its column)``.
        """
        base = self.intervals_at(v)
        total = 0.0
        stack = [(v, base)]
        while stack:
            w, iv = stack.pop()
            if self.var[w] < 0:
                continue
            k, ci = self.var[w], self.cut_idx[w]
            legal = self.legal_columns(iv)
            width = 0
            for kk, lo, hi in legal:
                if kk == k:
                    width = hi - lo
                    if not (lo <= ci < hi):
                        return False, -math.inf
                    break
            else:
                return False, -math.inf
            total += -math.log(len(legal)) - math.log(width)
            lo, hi = iv.get(k, (0, self.ws.grids[k].size))
            ivl = dict(iv)
            ivl[k] = (lo, ci)
            ivr = dict(iv)
            ivr[k] = (ci + 1, hi)
            stack.append((self.left[w], ivl))
            stack.append((self.right[w], ivr))
        return True, total

    def predict_row(self, u: np.ndarray) -> float:
        v = 0
        grids = self.ws.grids
        while self.var[v] >= 0:
            if u[self.var[v]] <= grids[self.var[v]][self.cut_idx[v]]:
                v = self.left[v]
            else:
                v = self.right[v]
        return float(self.values[v])


def tree_predict(tree: Tree, u: np.ndarray) -> float:
    """Follow decision rules from the root; left when ``u[k] <= c``."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != tree.ws.p:
        raise ConfigError(f"predictor has {u.shape[0]} entries, tree expects {tree.ws.p}")
    return tree.predict_row(u)


@dataclass
class Proposal:
    """One candidate tree move with everything the acceptance step needs."""

    kind: str
    tree: Tree | None
    log_prior_ratio: float = -math.inf
    log_q_ratio: float = 0.0
    rows: np.ndarray | None = None
    viable: bool = False


def _child_splittable(legal: list[tuple[int, int, int]], k: int, lo: int, hi: int) -> bool:
    # child differs from the parent only in column k's interval [lo, hi)
    if hi > lo:
        return True
    return any(kk != k for kk, _, _ in legal)


def _propose_grow(tree: Tree, rng: np.random.Generator, prior: ForestPrior) -> Proposal | None:
    leaves = tree.leaf_ids
    leaf = leaves[rng.integers(len(leaves))]
    intervals = tree.intervals_at(leaf)
    legal = tree.legal_columns(intervals)
    if not legal:
        return None
    k, lo, hi = legal[rng.integers(len(legal))]
    ci = int(rng.integers(lo, hi))
    rows = np.nonzero(tree.leaf_of_row == leaf)[0]
    go_left = tree.ws.cols[k][rows] <= tree.ws.grids[k][ci]
    n_left = int(go_left.sum())
    if n_left == 0 or n_left == rows.shape[0]:
        return Proposal(MOVE_GROW, None)  # would strand an empty leaf
    new = tree.copy()
    new.grow_leaf(leaf, k, ci, rows, go_left)

    d = tree.depth[leaf]
    p_d = split_prob(d, prior)
    p_d1 = split_prob(d + 1, prior)
    width = hi - lo
    lpr = math.log(p_d) - math.log1p(-p_d) - math.log(len(legal)) - math.log(width)
    if _child_splittable(legal, k, lo, ci):
        lpr += math.log1p(-p_d1)
    if _child_splittable(legal, k, ci + 1, hi):
        lpr += math.log1p(-p_d1)

    n_prunable_new = len(new.prunable_nodes())
    lqr = (math.log(MOVE_PROBS[MOVE_PRUNE]) - math.log(n_prunable_new)
           - math.log(MOVE_PROBS[MOVE_GROW])
           + math.log(len(leaves)) + math.log(len(legal)) + math.log(width))
    return Proposal(MOVE_GROW, new, lpr, lqr, rows, True)


def _propose_prune(tree: Tree, rng: np.random.Generator, prior: ForestPrior) -> Proposal | None:
    prunable = tree.prunable_nodes()
    if not prunable:
        return None
    v = prunable[rng.integers(len(prunable))]
    lid, rid = tree.left[v], tree.right[v]
    mask = (tree.leaf_of_row == lid) | (tree.leaf_of_row == rid)
    rows = np.nonzero(mask)[0]
    new = tree.copy()
    new.prune_node(v, mask)

    intervals = tree.intervals_at(v)
    legal = tree.legal_columns(intervals)
    k, ci = tree.var[v], tree.cut_idx[v]
    lo, hi = intervals.get(k, (0, tree.ws.grids[k].size))
    width = hi - lo
    d = tree.depth[v]
    p_d = split_prob(d, prior)
    p_d1 = split_prob(d + 1, prior)
    lpr = -(math.log(p_d) - math.log1p(-p_d) - math.log(len(legal)) - math.log(width))
    if _child_splittable(legal, k, lo, ci):
        lpr -= math.log1p(-p_d1)
    if _child_splittable(legal, k, ci + 1, hi):
        lpr -= math.log1p(-p_d1)

    lqr = (math.log(MOVE_PROBS[MOVE_GROW]) - math.log(new.n_leaves)
           - math.log(len(legal)) - math.log(width)
           - math.log(MOVE_PROBS[MOVE_PRUNE]) + math.log(len(prunable)))
    return Proposal(MOVE_PRUNE, new, lpr, lqr, rows, True)


def _subtree_ok_and_rows(tree_new: Tree, tree_old: Tree, v: int) -> tuple[bool, np.ndarray]:
    """Re-route rows through the modified subtree; check no leaf goes empty."""
    leaf_set = tree_old.leaves_under(v)
    mask = np.isin(tree_old.leaf_of_row, leaf_set)
    rows = np.nonzero(mask)[0]
    tree_new.route_rows(v, rows, tree_new.leaf_of_row)
    counts = np.bincount(tree_new.leaf_of_row[rows],
                         minlength=len(tree_new.var))
    for leaf in tree_new.leaves_under(v):
        if counts[leaf] == 0:
            return False, rows
    return True, rows


def _propose_change(tree: Tree, rng: np.random.Generator, prior: ForestPrior) -> Proposal | None:
    if not tree.internal_ids:
        return None
    v = tree.internal_ids[rng.integers(len(tree.internal_ids))]
    intervals = tree.intervals_at(v)
    legal = tree.legal_columns(intervals)
    k_new, lo, hi = legal[rng.integers(len(legal))]
    ci_new = int(rng.integers(lo, hi))
    k_old, ci_old = tree.var[v], tree.cut_idx[v]
    width_old = next(hi_ - lo_ for kk, lo_, hi_ in legal if kk == k_old)

    new = tree.copy()
    new.var[v], new.cut_idx[v] = k_new, ci_new
    ok, rows = _subtree_ok_and_rows(new, tree, v)
    if not ok:
        return Proposal(MOVE_CHANGE, None)
    ok_new, rules_new = new.validate_subtree(v)
    if not ok_new:
        return Proposal(MOVE_CHANGE, None)
    _, rules_old = tree.validate_subtree(v)
    lpr = rules_new - rules_old
    lqr = math.log(hi - lo) - math.log(width_old)
    return Proposal(MOVE_CHANGE, new, lpr, lqr, rows, True)


def _propose_swap(tree: Tree, rng: np.random.Generator, prior: ForestPrior) -> Proposal | None:
    pairs = [(v, c) for v in tree.internal_ids
             for c in (tree.left[v], tree.right[v]) if tree.var[c] >= 0]
    if not pairs:
        return None
    v, c = pairs[rng.integers(len(pairs))]
    new = tree.copy()
    new.var[v], new.var[c] = new.var[c], new.var[v]
    new.cut_idx[v], new.cut_idx[c] = new.cut_idx[c], new.cut_idx[v]
    ok_new, rules_new = new.validate_subtree(v)
    if not ok_new:
        return Proposal(MOVE_SWAP, None)
    ok, rows = _subtree_ok_and_rows(new, tree, v)
    if not ok:
        return Proposal(MOVE_SWAP, None)
    _, rules_old = tree.validate_subtree(v)
    # pair count is structure-determined, hence unchanged: symmetric proposal
    return Proposal(MOVE_SWAP, new, rules_new - rules_old, 0.0, rows, True)


_PROPOSERS = {MOVE_GROW: _propose_grow, MOVE_PRUNE: _propose_prune,
              MOVE_CHANGE: _propose_change, MOVE_SWAP: _propose_swap}


def propose_tree_move(tree: Tree, rng: np.random.Generator,
                      prior: ForestPrior) -> Proposal | None:
    """Draw a move type and build the candidate tree.

    Returns None when the drawn move type has no legal instance (a no-op
    draw); returns a non-viable Proposal when the candidate would strand an
    empty leaf or an illegal rule (an outright rejection).
    """
    u = rng.random()
    if u < _MOVE_EDGES[0]:
        kind = MOVE_GROW
    elif u < _MOVE_EDGES[1]:
        kind = MOVE_PRUNE
    elif u < _MOVE_EDGES[2]:
        kind = MOVE_CHANGE
    else:
        kind = MOVE_SWAP
    return _PROPOSERS[kind](tree, rng, prior)


def mh_update_tree(tree: Tree, partial_residuals: np.ndarray, sigma: float,
                   prior: ForestPrior, rng: np.random.Generator,
                   stats: dict | None = None,
                   likelihood_on: bool = True) -> Tree:
    """One Metropolis-Hastings structure update.

    Acceptance probability is min(1, prior ratio x marginal-likelihood ratio
    x proposal ratio); with ``likelihood_on`` false the chain targets the
    tree prior alone (used by the prior-sampling oracle tests).
    """
    prop = propose_tree_move(tree, rng, prior)
    if prop is None:
        return tree
    if stats is not None:
        rec = stats.setdefault(prop.kind, [0, 0])
        rec[0] += 1
    if not prop.viable:
        return tree
    log_alpha = prop.log_prior_ratio + prop.log_q_ratio
    if likelihood_on:
        s2 = sigma * sigma
        sm2 = prior.sigma_mu2
        r = partial_residuals[prop.rows]
        old_assign = tree.leaf_of_row[prop.rows]
        new_assign = prop.tree.leaf_of_row[prop.rows]
        log_alpha += (_partition_collapsed(new_assign, r, s2, sm2)
                      - _partition_collapsed(old_assign, r, s2, sm2))
    if math.log(rng.random()) < log_alpha:
        if stats is not None:
            stats[prop.kind][1] += 1
        return prop.tree
    return tree


def _partition_collapsed(assign: np.ndarray, r: np.ndarray, s2: float, sm2: float) -> float:
    counts = np.bincount(assign)
    sums = np.bincount(assign, weights=r)
    nz = counts > 0
    return _collapsed_terms(sums[nz], counts[nz], s2, sm2)


def draw_leaf_values(tree: Tree, partial_residuals: np.ndarray, sigma: float,
                     prior: ForestPrior, rng: np.random.Generator) -> Tree:
    """Redraw every leaf value from its conjugate normal posterior."""
    cap = len(tree.var)
    counts = np.bincount(tree.leaf_of_row, minlength=cap)
    sums = np.bincount(tree.leaf_of_row, weights=partial_residuals, minlength=cap)
    lids = np.fromiter(tree.leaf_ids, dtype=np.int64, count=len(tree.leaf_ids))
    n_l = counts[lids]
    s_l = sums[lids]
    s2 = sigma * sigma
    sm2 = prior.sigma_mu2
    denom = n_l * sm2 + s2
    mean = sm2 * s_l / denom
    sd = np.sqrt(sm2 * s2 / denom)
    tree.values[lids] = mean + sd * rng.standard_normal(lids.shape[0])
    return tree


class Forest:
    """A fixed-size collection of trees with cached per-row fits."""

    def __init__(self, ws: TreeWorkspace, prior: ForestPrior):
        if prior.grids is None:
            raise ConfigError("forest prior has no split grids")
        self.ws = ws
        self.prior = prior
        self.trees = [Tree(ws) for _ in range(prior.n_trees)]
        self.fits = [np.zeros(ws.n) for _ in range(prior.n_trees)]
        self.m_total = np.zeros(ws.n)
        self.move_stats: dict[str, list[int]] = {}

    def predict(self, u: np.ndarray) -> float:
        return float(sum(t.predict_row(np.asarray(u, dtype=float)) for t in self.trees))

    def refresh_cache(self) -> None:
        for j, t in enumerate(self.trees):
            self.fits[j] = t.fit_vector()
        self.m_total = np.add.reduce(self.fits)

    def cache_error(self) -> float:
        fresh = np.add.reduce([t.fit_vector() for t in self.trees])
        return float(np.abs(fresh - self.m_total).max())

    def counterfactual_total(self, flipped_col: np.ndarray, col_index: int = 0) -> np.ndarray:
        """Ensemble fit with one predictor column replaced, reusing cached fits
        of trees that never split on it."""
        cols = list(self.ws.cols)
        cols[col_index] = np.ascontiguousarray(flipped_col, dtype=float)
        total = self.m_total.copy()
        all_rows = np.arange(self.ws.n)
        for j, t in enumerate(self.trees):
            if t.uses_column(col_index):
                assign = t.assign_with_columns(cols, all_rows)
                total += t.values[assign] - self.fits[j]
        return total


def forest_predict(forest: Forest, u: np.ndarray) -> float:
    """Sum of the individual tree contributions at one predictor vector."""
    return forest.predict(u)


def backfit_sweep(forest: Forest, shifted_responses: np.ndarray, sigma: float,
                  rng: np.random.Generator) -> Forest:
    """One backfitting pass: update each tree against its partial residuals.

    For tree j the partial residuals are the shifted responses minus every
    other tree's fit; the structure move and the leaf redraw both see the
    same residuals. The ensemble cache is rebuilt exactly on exit.
    """
    resid = shifted_responses - forest.m_total
    prior = forest.prior
    for j, tree in enumerate(forest.trees):
        partial = resid + forest.fits[j]
        tree = mh_update_tree(tree, partial, sigma, prior, rng, forest.move_stats)
        draw_leaf_values(tree, partial, sigma, prior, rng)
        new_fit = tree.fit_vector()
        resid += forest.fits[j] - new_fit
        forest.trees[j] = tree
        forest.fits[j] = new_fit
    forest.m_total = np.add.reduce(forest.fits)
    return forest


# -- compact per-draw snapshots -------------------------------------------

@dataclass
class PackedForest:
    """Flat-array snapshot of a forest, for storage and batch prediction."""

    var: np.ndarray      # int32, -1 marks a leaf
    cut: np.ndarray      # float64 cut values (NaN at leaves)
    left: np.ndarray     # int32 absolute node index
    right: np.ndarray
    value: np.ndarray    # float64 leaf values (0 at internal nodes)
    offsets: np.ndarray  # int32, length n_trees + 1

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    def predict_matrix(self, U: np.ndarray) -> np.ndarray:
        """Ensemble fit for every row of ``U``."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        n = U.shape[0]
        total = np.zeros(n)
        for j in range(self.n_trees):
            idx = np.full(n, self.offsets[j], dtype=np.int64)
            while True:
                v = self.var[idx]
                active = np.nonzero(v >= 0)[0]
                if active.size == 0:
                    break
                cur = idx[active]
                go_left = U[active, self.var[cur]] <= self.cut[cur]
                idx[active] = np.where(go_left, self.left[cur], self.right[cur])
            total += self.value[idx]
        return total

    def to_jsonable(self) -> dict:
        return {
            "var": self.var.tolist(),
            "cut": self.cut.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "offsets": self.offsets.tolist(),
        }

    @classmethod
    def from_jsonable(cls, doc: dict) -> "PackedForest":
        return cls(var=np.asarray(doc["var"], dtype=np.int32),
                   cut=np.asarray(doc["cut"], dtype=float),
                   left=np.asarray(doc["left"], dtype=np.int32),
                   right=np.asarray(doc["right"], dtype=np.int32),
                   value=np.asarray(doc["value"], dtype=float),
                   offsets=np.asarray(doc["offsets"], dtype=np.int32))


def pack_forest(forest: Forest) -> PackedForest:
    """Renumber live trees into contiguous flat arrays (preorder per tree)."""
    var, cut, left, right, value, offsets = [], [], [], [], [], [0]
    for t in forest.trees:
        base = len(var)
        remap: dict[int, int] = {}
        order: list[int] = []
        stack = [0]
        while stack:
            v = stack.pop()
            remap[v] = base + len(order)
            order.append(v)
            if t.var[v] >= 0:
                stack.append(t.right[v])
                stack.append(t.left[v])
        for v in order:
            if t.var[v] >= 0:
                var.append(t.var[v])
                cut.append(float(t.ws.grids[t.var[v]][t.cut_idx[v]]))
                left.append(remap[t.left[v]])
                right.append(remap[t.right[v]])
                value.append(0.0)
            else:
                var.append(-1)
                cut.append(math.nan)
                left.append(-1)
                right.append(-1)
                value.append(float(t.values[v]))
        offsets.append(len(var))
    return PackedForest(np.asarray(var, dtype=np.int32), np.asarray(cut),
                        np.asarray(left, dtype=np.int32),
                        np.asarray(right, dtype=np.int32),
                        np.asarray(value), np.asarray(offsets, dtype=np.int32))
