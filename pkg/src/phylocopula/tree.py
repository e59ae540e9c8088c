"""Rooted phylogenetic trees: Newick I/O, unit-depth normalization, and the
prior matrices derived from them (shared-ancestry correlation H and pairwise
tree distance D)."""

import math

import numpy as np

__all__ = [
    "TreeNode",
    "PhyloTree",
    "TreeCorrelation",
    "TreeDistance",
    "NewickError",
    "TreeError",
    "parse_newick",
    "read_newick_file",
    "normalize_to_unit_depth",
    "tree_correlation",
    "tree_distance",
    "set_unit_branch_lengths",
    "write_matrix_csv",
    "read_matrix_csv",
]


class NewickError(ValueError):
    """Malformed Newick text. ``offset`` is the character position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class TreeError(ValueError):
    """Structurally invalid tree (labels, branch lengths, depths)."""


class TreeNode:
    __slots__ = ("name", "length", "children", "parent")

    def __init__(self, name=None, length=None):
        self.name = name
        self.length = length
        self.children = []
        self.parent = None

    def add_child(self, node):
        node.parent = self
        self.children.append(node)

    @property
    def is_terminal(self):
        return not self.children


class PhyloTree:
    """Rooted tree with branch lengths and uniquely labeled terminals.

    The root may carry its own branch length (a root edge); node *depth* is
    the branch-length sum from the origin above that edge, so a tree whose
    first divergence happens at time ``s`` is written with a root edge of
    length ``s``.
    """

    def __init__(self, root):
        self.root = root
        self._validate()

    def _validate(self):
        if self.root is None or (self.root.is_terminal and not self.root.name):
            raise TreeError("empty tree")
        seen = set()
        for node in self.walk():
            if node is not self.root and node.parent is None:
                raise TreeError("non-root node without a parent")
            if node.length is not None and not (node.length >= 0):
                raise TreeError(f"negative branch length {node.length!r}")
            if node.is_terminal:
                if not node.name:
                    raise TreeError("terminal node without a label")
                if node.name in seen:
                    raise TreeError(f"duplicate terminal label {node.name!r}")
                seen.add(node.name)

    def walk(self):
        """Yield nodes in preorder (parent before children, left to right)."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def terminals(self):
        return [n for n in self.walk() if n.is_terminal]

    @property
    def terminal_labels(self):
        return [n.name for n in self.terminals()]

    @property
    def n_terminals(self):
        return len(self.terminals())

    def depths(self):
        """Map node -> branch-length sum from the origin (root edge included).

        A root with no explicit length has no root edge and sits at depth 0.
        """
        out = {}
        for node in self.walk():
            own = 0.0 if node.length is None else node.length
            out[node] = own + (0.0 if node.parent is None else out[node.parent])
        return out

    def is_ultrametric(self, rel_tol=1e-9):
        d = self.depths()
        vals = [d[t] for t in self.terminals()]
        top = max(vals)
        return top > 0 and all(abs(v - top) <= rel_tol * top for v in vals)

    def to_newick(self):
        """Serialize to a Newick string, preserving branch lengths exactly."""

        def fmt_label(name):
            if name is None:
                return ""
            if any(c in name for c in "():,;'\t\n ") or name == "":
                return "'" + name.replace("'", "''") + "'"
            return name

        def fmt(node):
            if node.is_terminal:
                body = fmt_label(node.name)
            else:
                body = "(" + ",".join(fmt(c) for c in node.children) + ")"
                body += fmt_label(node.name)
            if node.length is not None:
                body += ":" + repr(node.length)
            return body

        return fmt(self.root) + ";"

    def copy(self):
        def clone(node):
            new = TreeNode(node.name, node.length)
            for child in node.children:
                new.add_child(clone(child))
            return new

        return PhyloTree(clone(self.root))


def parse_newick(text):
    """Parse a single Newick statement into a :class:`PhyloTree`.

    Labels may be single-quoted (with ``''`` escaping an embedded quote);
    branch lengths are optional and default to 1.0. Raises
    :class:`NewickError` with the failing character offset on syntax errors.
    """
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos] in " \t\r\n":
            pos += 1

    def parse_label():
        nonlocal pos
        if pos < n and text[pos] == "'":
            start = pos
            pos += 1
            chunks = []
            while True:
                if pos >= n:
                    raise NewickError("unterminated quoted label", start)
                c = text[pos]
                if c == "'":
                    if pos + 1 < n and text[pos + 1] == "'":
                        chunks.append("'")
                        pos += 2
                    else:
                        pos += 1
                        return "".join(chunks)
                else:
                    chunks.append(c)
                    pos += 1
        start = pos
        while pos < n and text[pos] not in "():,;' \t\r\n[":
            pos += 1
        return text[start:pos]

    def parse_length():
        nonlocal pos
        skip_ws()
        if pos < n and text[pos] == ":":
            pos += 1
            skip_ws()
            start = pos
            while pos < n and (text[pos] in "+-.eE" or text[pos].isdigit()):
                pos += 1
            token = text[start:pos]
            try:
                value = float(token)
            except ValueError:
                raise NewickError(f"invalid branch length {token!r}", start) from None
            if math.isnan(value) or math.isinf(value):
                raise NewickError(f"non-finite branch length {token!r}", start)
            return value
        return None

    def parse_subtree():
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise NewickError("unexpected end of input", pos)
        if text[pos] == "(":
            open_at = pos
            pos += 1
            node = TreeNode()
            while True:
                node.add_child(parse_subtree())
                skip_ws()
                if pos >= n:
                    raise NewickError("unbalanced parenthesis", pos)
                if text[pos] == ",":
                    pos += 1
                    continue
                if text[pos] == ")":
                    pos += 1
                    break
                raise NewickError(f"expected ',' or ')' to match '(' at {open_at}", pos)
            skip_ws()
            if pos < n and text[pos] not in "():,;[":
                node.name = parse_label() or None
            node.length = parse_length()
            return node
        label = parse_label()
        node = TreeNode(label or None)
        node.length = parse_length()
        return node

    skip_ws()
    root = parse_subtree()
    skip_ws()
    if pos >= n or text[pos] != ";":
        raise NewickError("expected ';' terminating the tree", pos)
    pos += 1
    skip_ws()
    if pos < n:
        raise NewickError("trailing characters after ';'", pos)
    if root.is_terminal and root.name is None:
        raise TreeError("empty tree")
    tree = PhyloTree(root)
    # fill in the documented default for omitted lengths; an absent root
    # length means no root edge, so it stays None
    for node in tree.walk():
        if node.length is None and node.parent is not None:
            node.length = 1.0
    return tree


def read_newick_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_newick(fh.read().strip())


def set_unit_branch_lengths(tree):
    """Return a copy with every non-root branch length set to 1.

    Intended for trees built from taxonomic ranks, where each edge spans one
    rank level; the root keeps no root edge so the deepest split sits at
    height 0. Normalize afterwards to place terminals at depth 1.
    """
    out = tree.copy()
    for node in out.walk():
        node.length = None if node.parent is None else 1.0
    return out


def normalize_to_unit_depth(tree):
    """Rescale a tree so every root-to-terminal path has length 1.

    Ultrametric trees are scaled uniformly. Otherwise each lineage is
    rescaled independently: a node's new height is its depth divided by the
    largest terminal depth within its subtree, which keeps heights monotone
    along every path and places all terminals exactly at 1.
    """
    out = tree.copy()
    depth = out.depths()
    # deepest terminal below each node, computed leaf-up
    max_below = {}
    for node in reversed(list(out.walk())):
        if node.is_terminal:
            if depth[node] <= 0:
                raise TreeError(
                    f"terminal {node.name!r} has zero depth; cannot normalize"
                )
            max_below[node] = depth[node]
        else:
            max_below[node] = max(max_below[c] for c in node.children)
    height = {node: depth[node] / max_below[node] for node in out.walk()}
    for node in out.walk():
        parent_h = 0.0 if node.parent is None else height[node.parent]
        new_len = height[node] - parent_h
        if node.parent is None and new_len == 0.0:
            node.length = None  # keep "no root edge" rather than a 0-length one
        else:
            node.length = new_len
    return out


def _require_unit_depth(tree):
    depth = tree.depths()
    terms = tree.terminals()
    if len(terms) < 2:
        raise TreeError("need at least 2 terminals")
    for t in terms:
        if abs(depth[t] - 1.0) > 1e-6:
            raise TreeError(
                f"terminal {t.name!r} at depth {depth[t]:.6g}; "
                "normalize_to_unit_depth first"
            )
    return depth, terms


def _mrca_heights(tree):
    """Heights of each pair's most recent common ancestor, plus the label order."""
    depth, terms = _require_unit_depth(tree)
    labels = [t.name for t in terms]
    index = {t: i for i, t in enumerate(terms)}
    p = len(terms)
    heights = np.zeros((p, p))

    def gather(node):
        # returns terminal indices under node; fills cross-subtree pairs
        if node.is_terminal:
            return [index[node]]
        groups = [gather(c) for c in node.children]
        node_height = depth[node]  # the split happens at this node's height
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                for i in groups[a]:
                    heights[i, groups[b]] = node_height
                    heights[groups[b], i] = node_height
        merged = []
        for g in groups:
            merged.extend(g)
        return merged

    gather(tree.root)
    np.fill_diagonal(heights, [depth[t] for t in terms])
    return heights, labels


class TreeCorrelation:
    """Symmetric PSD matrix of pairwise shared-ancestry heights, unit diagonal."""

    def __init__(self, matrix, labels):
        self.matrix = matrix
        self.labels = list(labels)

    def __getitem__(self, key):
        return self.matrix[key]


class TreeDistance:
    """Symmetric nonnegative matrix of pairwise path lengths through the MRCA."""

    def __init__(self, matrix, labels):
        self.matrix = matrix
        self.labels = list(labels)

    def __getitem__(self, key):
        return self.matrix[key]


def tree_correlation(tree):
    """Correlation matrix H with H[j,k] = height of the MRCA of j and k.

    Requires a unit-depth tree. The diagonal is exactly 1; a tiny diagonal
    bump (then rescale) repairs eigenvalues in (-1e-10, 0) caused by
    rounding.
    """
    heights, labels = _mrca_heights(tree)
    H = np.array(heights, dtype=float)
    np.fill_diagonal(H, 1.0)
    H = 0.5 * (H + H.T)
    min_eig = float(np.linalg.eigvalsh(H)[0])
    if min_eig < -1e-10:
        raise TreeError(f"tree correlation not PSD (min eigenvalue {min_eig:.3e})")
    if min_eig < 0.0:
        H = H + 1e-10 * np.eye(H.shape[0])
        H = H / (1.0 + 1e-10)
        np.fill_diagonal(H, 1.0)
    return TreeCorrelation(H, labels)


def tree_distance(tree):
    """Distance matrix D with D[j,k] = path length from j and k to their MRCA."""
    heights, labels = _mrca_heights(tree)
    depth = np.diag(heights).copy()
    D = depth[:, None] + depth[None, :] - 2.0 * heights
    np.fill_diagonal(D, 0.0)
    D = np.maximum(D, 0.0)
    return TreeDistance(0.5 * (D + D.T), labels)


def write_matrix_csv(path, matrix, labels):
    """Write a labeled square matrix as CSV at 12 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(labels) + "\n")
        for lab, row in zip(labels, matrix):
            fh.write(lab + "," + ",".join(f"{v:.12g}" for v in row) + "\n")


def read_matrix_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        labels = header[1:]
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(labels) + 1:
                raise ValueError(f"malformed matrix row in {path}")
            rows.append([float(v) for v in parts[1:]])
    return np.array(rows), labels
