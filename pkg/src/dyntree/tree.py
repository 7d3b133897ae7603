"""Binary recursive-partition trees.

A tree is identified with its root :class:`Node`.  Nodes are immutable once
built: structural edits rebuild only the path from the root to the edited
node and share every other subtree with the original tree, so thousands of
particles can hold closely related trees cheaply.

Routing convention: an internal node with rule ``(dim, value)`` sends ``x``
to the left child when ``x[dim] <= value`` and to the right child
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import LEAF, Node, route_path, subtree_rows



MAX_DEPTH = 256


@dataclass(frozen=True)
class TreePrior:
    """Depth-dependent split probability ``alpha * (1 + depth) ** -beta``."""

    alpha: float = 0.95
    beta: float = 2.0
    log_split_table: np.ndarray = field(init=False, repr=False, compare=False)
    log_stop_table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.beta > 0.0:
            raise ValueError("beta must be positive")
        p = self.alpha * (1.0 + np.arange(MAX_DEPTH + 2)) ** (-self.beta)
        object.__setattr__(self, "log_split_table", np.log(p))
        object.__setattr__(self, "log_stop_table", np.log1p(-p))

    def p_split(self, depth: int) -> float:
        return self.alpha * (1.0 + depth) ** (-self.beta)

    def log_split(self, depth: int) -> float:
        return float(self.log_split_table[depth])

    def log_stop(self, depth: int) -> float:
        return float(self.log_stop_table[depth])


@dataclass(frozen=True)
class SplitRule:
    dim: int
    value: float

    def goes_left(self, x) -> bool:
        return x[self.dim] <= self.value


def make_leaf(depth: int, rows: np.ndarray, stats, lml: float, prior: TreePrior) -> Node:
    return kernels.new_leaf(depth, np.asarray(rows, dtype=np.intp), stats, lml, prior.log_stop(depth))


def make_internal(depth: int, dim: int, value: float, left: Node, right: Node, prior: TreePrior) -> Node:
    return kernels.new_internal(depth, dim, value, left, right, prior.log_split(depth))


# ---------------------------------------------------------------------------
# queries


def route(root: Node, x) -> Node:
    """The leaf whose ancestor rules ``x`` satisfies."""
    node = root
    while node.dim != LEAF:
        node = node.left if x[node.dim] <= node.value else node.right
    return node


def iter_nodes(root: Node):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if node.dim != LEAF:
            stack.append(node.right)
            stack.append(node.left)


def leaves(root: Node) -> list[Node]:
    return [n for n in iter_nodes(root) if n.dim == LEAF]


def height(root: Node) -> int:
    return max(n.depth for n in iter_nodes(root))


def subtree_stats(node: Node, model):
    """Sufficient statistics of all rows under ``node`` (memoised on the node)."""
    return kernels.subtree_stats(node, model.spec)


def log_prior(root: Node, prior: TreePrior) -> float:
    """Log tree prior: internal nodes have split and leaves have not."""
    total = 0.0
    for node in iter_nodes(root):
        total += prior.log_stop(node.depth) if node.dim == LEAF else prior.log_split(node.depth)
    return total


def grow_interval(values, min_leaf: int):
    """Split values ``s`` leaving at least ``min_leaf`` points on each side.

    ``values`` are the coordinates, in one dimension, of the leaf's points
    together with the arriving point.  Returns the half-open interval
    ``(l, u)`` of valid ``s`` (``x <= s`` goes left), or ``None`` if the
    dimension cannot be split.
    """
    v = np.sort(np.asarray(values, dtype=float))
    m = v.shape[0]
    if m < 2 * min_leaf:
        return None
    lo = v[min_leaf - 1]
    hi = v[m - min_leaf]
    if not lo < hi:
        return None
    return float(lo), float(hi)


def draw_split(lo: float, hi: float, u: float) -> float:
    """Map a uniform ``u`` in [0, 1) to a split value in ``[lo, hi)``."""
    s = lo + u * (hi - lo)
    if s >= hi:
        s = math.nextafter(hi, -math.inf)
    return s


def local_log_prior(path: list[Node], move: str, prior: TreePrior) -> float:
    """Log prior of the subtree rooted at the parent of the path's leaf.

    ``move`` is ``"stay"``, ``"prune"`` or ``"grow"``.  Candidate trees agree
    above the parent, so differences of this quantity equal differences of
    the full-tree log prior.  At the root (no parent) the subtree is the
    whole tree.
    """
    leaf = path[-1]
    dep = leaf.depth
    if move == "grow":
        own = prior.log_split(dep) + 2.0 * prior.log_stop(dep + 1)
    elif move == "stay":
        own = prior.log_stop(dep)
    elif move == "prune":
        if len(path) < 2:
            raise ValueError("cannot prune the root")
        return prior.log_stop(path[-2].depth)
    else:
        raise ValueError(f"unknown move {move!r}")
    if len(path) < 2:
        return own
    parent = path[-2]
    sibling = parent.right if parent.left is leaf else parent.left
    return prior.log_split(parent.depth) + own + sibling.sub_lp


# ---------------------------------------------------------------------------
# edits


def rebuild(path: list[Node], new_node: Node, prior: TreePrior) -> Node:
    """Replace ``path[-1]`` by ``new_node`` and copy its ancestors."""
    return kernels.rebuild(list(path), new_node, prior.log_split_table)


class TreeOps:
    """Structural edits of trees over one data store and leaf model."""

    def __init__(self, store, model, prior: TreePrior):
        self.store = store
        self.model = model
        self.prior = prior

    def leaf(self, depth: int, rows) -> Node:
        rows = np.asarray(rows, dtype=np.intp)
        stats = self.model.batch(self.store.X[rows], self.store.yf[rows])
        return make_leaf(depth, rows, stats, self.model.log_marginal(stats), self.prior)

    def root(self, rows) -> Node:
        return self.leaf(0, rows)

    def grow(self, root: Node, path: list[Node], rule: SplitRule, pending: int | None = None) -> Node:
        """Split the path's leaf (plus the pending row) by ``rule``."""
        leaf = path[-1]
        if leaf.dim != LEAF:
            raise ValueError("can only grow a leaf")
        rows = leaf.rows if pending is None else np.append(leaf.rows, pending)
        go_left = self.store.X[rows, rule.dim] <= rule.value
        left, right = rows[go_left], rows[~go_left]
        min_leaf = self.model.min_leaf
        if left.shape[0] < min_leaf or right.shape[0] < min_leaf:
            raise ValueError(
                f"split x[{rule.dim}] <= {rule.value} leaves {left.shape[0]}/{right.shape[0]} rows; "
                f"each child needs {min_leaf}"
            )
        node = make_internal(
            leaf.depth, rule.dim, rule.value, self.leaf(leaf.depth + 1, left), self.leaf(leaf.depth + 1, right), self.prior
        )
        return rebuild(path, node, self.prior)

    def prune(self, root: Node, path: list[Node], pending: int | None = None) -> Node:
        """Collapse the parent of the path's leaf, removing its sibling subtree."""
        if len(path) < 2:
            raise ValueError("prune is invalid for a parentless (root) leaf")
        parent = path[-2]
        rows = subtree_rows(parent)
        stats = subtree_stats(parent, self.model)
        if pending is not None:
            rows = np.append(rows, pending)
            stats = self.model.update(stats, self.store.X[pending], self.store.yf[pending])
        node = make_leaf(parent.depth, rows, stats, self.model.log_marginal(stats), self.prior)
        return rebuild(path[:-1], node, self.prior)

    def stay(self, root: Node, path: list[Node], pending: int) -> Node:
        """Add the pending row to the path's leaf without changing structure."""
        leaf = path[-1]
        stats = self.model.update(leaf.stats, self.store.X[pending], self.store.yf[pending])
        node = make_leaf(leaf.depth, np.append(leaf.rows, pending), stats, self.model.log_marginal(stats), self.prior)
        return rebuild(path, node, self.prior)

    def build(self, spec, rows, depth: int = 0) -> Node:
        """Build a tree from nested ``(dim, value, left, right)`` tuples.

        ``None`` marks a leaf.  Rows are routed through the rules; no size
        constraint is enforced, which makes this handy for tests.
        """
        rows = np.asarray(rows, dtype=np.intp)
        if spec is None:
            return self.leaf(depth, rows)
        dim, value, lspec, rspec = spec
        go_left = self.store.X[rows, dim] <= value
        return make_internal(
            depth,
            dim,
            value,
            self.build(lspec, rows[go_left], depth + 1),
            self.build(rspec, rows[~go_left], depth + 1),
            self.prior,
        )


# ---------------------------------------------------------------------------
# flat form and serialisation


def flatten(root: Node):
    """Preorder arrays ``(dims, values, left, right, leaf_nodes)``, memoised on the root.

    ``leaf_nodes`` maps a flat index to its :class:`Node` for leaves and is
    ``None`` for internal entries.
    """
    if root.flat is not None:
        return root.flat
    dims, values, left, right, nodes = [], [], [], [], []

    def visit(node):
        i = len(dims)
        dims.append(node.dim)
        values.append(node.value)
        left.append(-1)
        right.append(-1)
        nodes.append(node if node.dim == LEAF else None)
        if node.dim != LEAF:
            left[i] = visit(node.left)
            right[i] = visit(node.right)
        return i

    visit(root)
    flat = (
        np.array(dims, dtype=np.intp),
        np.array(values, dtype=float),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        nodes,
    )
    root.flat = flat
    return flat


def route_many(root: Node, X) -> tuple[np.ndarray, list]:
    """Flat leaf index for each row of ``X`` and the flat node list."""
    dims, values, left, right, nodes = flatten(root)
    if root.dim == LEAF:
        return np.zeros(len(X), dtype=np.intp), nodes
    return kernels.route(dims, values, left, right, X), nodes


def dumps(root: Node) -> str:
    """Indented text rendering: one rule per internal node, row count per leaf."""
    lines = []

    def visit(node, indent):
        pad = "  " * indent
        if node.dim == LEAF:
            lines.append(f"{pad}leaf n={node.rows.shape[0]}")
        else:
            lines.append(f"{pad}x[{node.dim}] <= {node.value!r}")
            visit(node.left, indent + 1)
            visit(node.right, indent + 1)

    visit(root, 0)
    return "\n".join(lines)


def to_table(roots: list[Node], model) -> tuple[list[dict], list[int]]:
    """Serialise trees into a shared node table and per-tree root ids."""
    ids: dict[int, int] = {}
    table: list[dict] = []

    def visit(node):
        key = id(node)
        if key in ids:
            return ids[key]
        if node.dim == LEAF:
            entry = {"depth": node.depth, "rows": node.rows.tolist(), "stats": model.stats_to_dict(node.stats)}
        else:
            entry = {"depth": node.depth, "dim": node.dim, "value": node.value, "left": visit(node.left), "right": visit(node.right)}
        ids[key] = len(table)
        table.append(entry)
        return ids[key]

    return table, [visit(r) for r in roots]


def from_table(table: list[dict], root_ids: list[int], model, prior: TreePrior) -> list[Node]:
    built: list[Node | None] = [None] * len(table)
    # children always precede parents in the table
    for i, e in enumerate(table):
        if "rows" in e:
            stats = model.stats_from_dict(e["stats"])
            built[i] = make_leaf(e["depth"], np.array(e["rows"], dtype=np.intp), stats, model.log_marginal(stats), prior)
        else:
            built[i] = make_internal(e["depth"], e["dim"], e["value"], built[e["left"]], built[e["right"]], prior)
    return [built[i] for i in root_ids]
