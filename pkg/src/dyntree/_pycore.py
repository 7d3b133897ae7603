"""Pure-Python particle core: tree nodes and the per-step propagate loop.

``_ckernels.pyx`` provides a compiled twin with the same functions and
semantics.  A model is described by ``spec = (kind, d, C, min_leaf)`` and
leaf statistics are flat float vectors (see ``_pykernels``).
"""

import math
from bisect import bisect_right

import numpy as np

from ._pykernels import *  # noqa: F401,F403
from ._pykernels import (
    prefix_lml_constant,
    prefix_lml_linear,
    prefix_lml_multinomial,
    stats_batch,
    stats_lml,
    stats_merge,
    stats_update,
    log_predictive,
    CONSTANT,
    LINEAR,
)

LEAF = -1
STAY, PRUNE, GROW = 0, 1, 2


class Node:
    """A tree node.

    Leaves (``dim == -1``) hold the store indices of their rows, their
    statistics vector and log marginal likelihood.  Internal nodes memoise
    the merged statistics of their subtree in ``stats`` on first use.  Every
    node caches the log prior (``sub_lp``) and summed leaf log marginals
    (``sub_lml``) of its subtree.
    """

    __slots__ = (
        "depth",
        "dim",
        "value",
        "left",
        "right",
        "rows",
        "stats",
        "lml",
        "sub_lp",
        "sub_lml",
        "n_leaves",
        "n_nodes",
        "flat",
    )

    @property
    def is_leaf(self):
        return self.dim == LEAF

    def __repr__(self):
        if self.dim == LEAF:
            return f"Leaf(depth={self.depth}, n={self.rows.shape[0]})"
        return f"Internal(depth={self.depth}, x[{self.dim}] <= {self.value:.6g})"


def new_leaf(depth, rows, stats, lml, log_stop):
    node = Node()
    node.depth = depth
    node.dim = LEAF
    node.value = math.nan
    node.left = None
    node.right = None
    node.rows = rows
    node.stats = stats
    node.lml = lml
    node.sub_lp = log_stop
    node.sub_lml = lml
    node.n_leaves = 1
    node.n_nodes = 1
    node.flat = None
    return node


def new_internal(depth, dim, value, left, right, log_split):
    node = Node()
    node.depth = depth
    node.dim = dim
    node.value = value
    node.left = left
    node.right = right
    node.rows = None
    node.stats = None
    node.lml = math.nan
    node.sub_lp = log_split + left.sub_lp + right.sub_lp
    node.sub_lml = left.sub_lml + right.sub_lml
    node.n_leaves = left.n_leaves + right.n_leaves
    node.n_nodes = 1 + left.n_nodes + right.n_nodes
    node.flat = None
    return node


def rebuild(path, new_node, log_split):
    """Replace ``path[-1]`` by ``new_node``, copying its ancestors."""
    old = path[-1]
    node = new_node
    for anc in reversed(path[:-1]):
        if anc.left is old:
            node = new_internal(anc.depth, anc.dim, anc.value, node, anc.right, log_split[anc.depth])
        else:
            node = new_internal(anc.depth, anc.dim, anc.value, anc.left, node, log_split[anc.depth])
        old = anc
    return node


def route_path(root, x):
    path = [root]
    node = root
    while node.dim != LEAF:
        node = node.left if x[node.dim] <= node.value else node.right
        path.append(node)
    return path


def subtree_stats(node, spec):
    """Statistics of all rows under ``node``, memoised on internal nodes."""
    if node.stats is None:
        kind, d, C, _ = spec
        node.stats = stats_merge(kind, d, C, subtree_stats(node.left, spec), subtree_stats(node.right, spec))
    return node.stats


def _collect_rows(node, out):
    if node.dim == LEAF:
        out.append(node.rows)
    else:
        _collect_rows(node.left, out)
        _collect_rows(node.right, out)


def subtree_rows(node):
    if node.dim == LEAF:
        return node.rows
    parts = []
    _collect_rows(node, parts)
    return np.concatenate(parts)


def group_roots(particles):
    """Distinct roots (by identity) and the group label of every particle."""
    index = {}
    roots = []
    labels = np.empty(len(particles), dtype=np.intp)
    for i, r in enumerate(particles):
        g = index.get(id(r))
        if g is None:
            g = index[id(r)] = len(roots)
            roots.append(r)
        labels[i] = g
    return roots, labels


def weigh(roots, x, y, spec):
    """Paths to the leaf of ``x`` and the log predictive of ``y`` for each root."""
    kind, d, C, _ = spec
    paths = []
    lw = np.empty(len(roots))
    memo = {}
    for g, r in enumerate(roots):
        path = route_path(r, x)
        leaf = path[-1]
        v = memo.get(id(leaf))
        if v is None:
            v = memo[id(leaf)] = log_predictive(kind, d, C, leaf.stats, x, y)
        paths.append(path)
        lw[g] = v
    return paths, lw


def prefix_lml(spec, X, y):
    kind, d, C, _ = spec
    if kind == CONSTANT:
        return prefix_lml_constant(y)
    if kind == LINEAR:
        return prefix_lml_linear(X, y)
    return prefix_lml_multinomial(y, C)


class _Scan:
    """Grow candidates for one leaf joined with the arriving row."""

    def __init__(self, leaf, row, X, Y, spec):
        self.spec = spec
        self.depth = leaf.depth
        self.rows = np.append(leaf.rows, row)
        self.X = X[self.rows]
        self.y = Y[self.rows]
        m = self.rows.shape[0]
        k = spec[3]
        self.eligible = []
        self.lo = {}
        self.hi = {}
        if m >= 2 * k:
            srt = np.sort(self.X, axis=0)
            for j in range(X.shape[1]):
                lo, hi = float(srt[k - 1, j]), float(srt[m - k, j])
                if lo < hi:
                    self.eligible.append(j)
                    self.lo[j] = lo
                    self.hi[j] = hi
        self.dims = {}
        self.children = {}

    def dim(self, j):
        out = self.dims.get(j)
        if out is None:
            order = np.argsort(self.X[:, j], kind="stable")
            Xs, ys = self.X[order], self.y[order]
            left = prefix_lml(self.spec, Xs, ys)
            right = prefix_lml(self.spec, Xs[::-1], ys[::-1])[::-1]
            out = self.dims[j] = (order, Xs[:, j].tolist(), left.tolist(), right.tolist())
        return out

    def child_pair(self, j, key, X, Y, log_stop):
        out = self.children.get((j, key))
        if out is None:
            kind, d, C, _ = self.spec
            order = self.dims[j][0]
            dep = self.depth + 1
            pair = []
            for rows in (self.rows[order[:key]], self.rows[order[key:]]):
                s = stats_batch(kind, d, C, X[rows], Y[rows])
                pair.append(new_leaf(dep, rows, s, stats_lml(kind, d, C, s), log_stop[dep]))
            out = self.children[(j, key)] = tuple(pair)
        return out


def propagate(paths, labels, u, row, X, Y, binary, spec, log_split, log_stop, moves):
    """New particle roots after absorbing stored row ``row``.

    ``paths[g]`` is the root-to-leaf path of ``X[row]`` in distinct tree
    ``g`` (the row is not yet in its leaves) and ``labels[i]`` the tree
    resampled into slot ``i``.  Slot ``i`` consumes ``u[1, i]`` (grow
    dimension), ``u[2, i]`` (grow location) and ``u[3, i]`` (move).
    """
    kind, d, C, _ = spec
    x = X[row]
    y = Y[row]
    n = labels.shape[0]
    out = [None] * n
    stay_cache = {}
    prune_cache = {}
    scan_cache = {}
    u1 = u[1].tolist()
    u2 = u[2].tolist()
    u3 = u[3].tolist()
    by_group = {}
    for i, g in enumerate(labels.tolist()):
        by_group.setdefault(g, []).append(i)

    for g, slots in by_group.items():
        path = paths[g]
        leaf = path[-1]
        dep = leaf.depth
        hit = stay_cache.get(id(leaf))
        if hit is None:
            s = stats_update(kind, d, C, leaf.stats, x, y)
            node = new_leaf(dep, np.append(leaf.rows, row), s, stats_lml(kind, d, C, s), log_stop[dep])
            hit = stay_cache[id(leaf)] = (leaf, node)
        stay = hit[1]
        if not moves:
            root = rebuild(path, stay, log_split)
            for i in slots:
                out[i] = root
            continue

        parent = path[-2] if len(path) > 1 else None
        if parent is not None:
            sib = parent.right if parent.left is leaf else parent.left
            common = log_split[parent.depth] + sib.sub_lp + sib.sub_lml
            ph = prune_cache.get(id(parent))
            if ph is None:
                s = stats_update(kind, d, C, subtree_stats(parent, spec), x, y)
                ph = prune_cache[id(parent)] = [parent, s, stats_lml(kind, d, C, s), None]
            s_prune = log_stop[parent.depth] + ph[2]
        else:
            common = 0.0
            s_prune = -math.inf
        s_stay = common + log_stop[dep] + stay.lml

        scan = scan_cache.get(id(leaf))
        if scan is None:
            scan = scan_cache[id(leaf)] = _Scan(leaf, row, X, Y, spec)
        ne = len(scan.eligible)
        base = common + log_split[dep] + 2.0 * log_stop[dep + 1]

        stay_root = None
        prune_root = None
        for i in slots:
            s_grow = -math.inf
            if ne:
                pick = int(u1[i] * ne)
                if pick >= ne:
                    pick = ne - 1
                j = scan.eligible[pick]
                lo = scan.lo[j]
                hi = scan.hi[j]
                if binary[j]:
                    sv = 0.5 * (lo + hi)
                else:
                    sv = lo + u2[i] * (hi - lo)
                    if sv >= hi:
                        sv = math.nextafter(hi, -math.inf)
                _, vals, lml_left, lml_right = scan.dim(j)
                key = bisect_right(vals, sv)
                s_grow = base + lml_left[key] + lml_right[key]
            top = max(s_stay, s_prune, s_grow)
            if top == -math.inf:
                choice = STAY
            else:
                c0 = math.exp(s_stay - top)
                c1 = c0 + math.exp(s_prune - top)
                c2 = c1 + math.exp(s_grow - top)
                v = u3[i] * c2
                choice = STAY if v < c0 else (PRUNE if v < c1 else GROW)
            if choice == STAY:
                if stay_root is None:
                    stay_root = rebuild(path, stay, log_split)
                out[i] = stay_root
            elif choice == PRUNE:
                if prune_root is None:
                    ph = prune_cache[id(parent)]
                    if ph[3] is None:
                        rows = np.append(subtree_rows(parent), row)
                        ph[3] = new_leaf(parent.depth, rows, ph[1], ph[2], log_stop[parent.depth])
                    prune_root = rebuild(path[:-1], ph[3], log_split)
                out[i] = prune_root
            else:
                left, right = scan.child_pair(j, key, X, Y, log_stop)
                node = new_internal(dep, j, sv, left, right, log_split[dep])
                out[i] = rebuild(path, node, log_split)
    return out
