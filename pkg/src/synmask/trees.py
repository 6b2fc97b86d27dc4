"""Constituency trees from syntactic distances, and unlabeled bracket scoring.

The distance-to-tree transform splits top-down at the gap with the largest
distance (leftmost on ties) and recurses on both sides, yielding a binary
tree. Scoring compares unlabeled spans, excluding single-token spans and the
whole-sentence span; corpus scores micro-average the pooled counts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import CONT_MARKER, LABEL_SUBWORD


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class Leaf:
    position: int   # 1-based token index
    surface: str


@dataclass(frozen=True)
class Node:
    left: "Node | Leaf"
    right: "Node | Leaf"


def distance_to_tree(tau, tokens):
    """Recursive argmax split of the gap distances into a binary tree."""
    if len(tau) != len(tokens) - 1:
        raise TreeError(f"need {len(tokens) - 1} distances for {len(tokens)} "
                        f"tokens, got {len(tau)}")
    if not tokens:
        raise TreeError("empty sentence")

    def build(lo, hi):
        # tokens[lo:hi], gaps tau[lo:hi-1]
        if hi - lo == 1:
            return Leaf(lo + 1, tokens[lo])
        split = lo + max(range(hi - lo - 1), key=lambda k: (tau[lo + k], -k))
        return Node(build(lo, split + 1), build(split + 1, hi))

    return build(0, len(tokens))


def leaves(tree):
    if isinstance(tree, Leaf):
        return [tree]
    return leaves(tree.left) + leaves(tree.right)


def tree_span(tree):
    lvs = leaves(tree)
    return lvs[0].position, lvs[-1].position


def extract_spans(tree) -> set[tuple[int, int]]:
    """Unlabeled spans of internal nodes, minus trivial ones.

    Single-token spans and the whole-sentence span are excluded.
    """
    start, end = tree_span(tree)
    spans = set()

    def walk(node):
        if isinstance(node, Leaf):
            return
        s, e = tree_span(node)
        if s < e and not (s == start and e == end):
            spans.add((s, e))
        walk(node.left)
        walk(node.right)

    walk(tree)
    return spans


def tree_to_string(tree) -> str:
    if isinstance(tree, Leaf):
        return tree.surface
    return f"({tree_to_string(tree.left)} {tree_to_string(tree.right)})"


def bracket_prf(predicted: set, gold: set):
    """Unlabeled precision/recall/F1 with the empty-set conventions:
    an empty prediction has precision 1 iff gold is also empty, else 0."""
    match = len(predicted & gold)
    precision = match / len(predicted) if predicted else (1.0 if not gold else 0.0)
    recall = match / len(gold) if gold else (1.0 if not predicted else 0.0)
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def corpus_prf(pairs):
    """Micro-averaged P/R/F1: pool match/predicted/gold counts, then divide."""
    match = pred_total = gold_total = 0
    for predicted, gold in pairs:
        match += len(predicted & gold)
        pred_total += len(predicted)
        gold_total += len(gold)
    precision = match / pred_total if pred_total else 1.0
    recall = match / gold_total if gold_total else 1.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def collapse_subwords(tree, bpe_labels):
    """Merge runs of congenetic subword leaves into single word-level leaves.

    A run is a maximal marker-delimited group: pieces carrying the "@@"
    suffix plus the following final piece. If the lowest subtree containing
    the run dominates exactly those leaves it collapses to one leaf;
    otherwise the run becomes one leaf replacing its leftmost piece and the
    other pieces are deleted.
    """
    lvs = leaves(tree)
    if len(bpe_labels) != len(lvs):
        raise TreeError(f"{len(bpe_labels)} labels for {len(lvs)} leaves")
    for leaf, label in zip(lvs, bpe_labels):
        if leaf.surface.endswith(CONT_MARKER) and label != LABEL_SUBWORD:
            raise TreeError(f"leaf {leaf.surface!r} lacks subword label")

    # group leaf positions into words by the continuation marker
    groups = []
    current = []
    for leaf in lvs:
        current.append(leaf)
        if not leaf.surface.endswith(CONT_MARKER):
            groups.append(current)
            current = []
    if current:
        groups.append(current)

    def joined(group):
        return "".join(l.surface[:-len(CONT_MARKER)] if l.surface.endswith(CONT_MARKER)
                       else l.surface for l in group)

    keep_pos = {}      # leaf position -> replacement surface
    drop_pos = set()
    for group in groups:
        keep_pos[group[0].position] = joined(group)
        for leaf in group[1:]:
            drop_pos.add(leaf.position)

    def rebuild(node):
        if isinstance(node, Leaf):
            if node.position in drop_pos:
                return None
            return Leaf(node.position, keep_pos[node.position])
        left = rebuild(node.left)
        right = rebuild(node.right)
        if left is None:
            return right
        if right is None:
            return left
        return Node(left, right)

    collapsed = rebuild(tree)
    out = [None]
    counter = [0]

    def renumber(node):
        if isinstance(node, Leaf):
            counter[0] += 1
            return Leaf(counter[0], node.surface)
        return Node(renumber(node.left), renumber(node.right))

    return renumber(collapsed)


@dataclass
class GoldTree:
    """Parsed n-ary gold tree: label, children (GoldTree) or token (str)."""

    label: str
    children: list
    token: str | None = None


def _parse_sexpr(line: str, lineno: int | None = None):
    where = f" at line {lineno}" if lineno is not None else ""
    pos = 0
    n = len(line)

    def skip_ws():
        nonlocal pos
        while pos < n and line[pos].isspace():
            pos += 1

    def atom():
        nonlocal pos
        start = pos
        while pos < n and not line[pos].isspace() and line[pos] not in "()":
            pos += 1
        return line[start:pos]

    def node():
        nonlocal pos
        skip_ws()
        if pos >= n:
            raise TreeError(f"unbalanced parentheses{where}")
        if line[pos] != "(":
            return atom()
        pos += 1
        items = []
        while True:
            skip_ws()
            if pos >= n:
                raise TreeError(f"unbalanced parentheses{where}")
            if line[pos] == ")":
                pos += 1
                return items
            items.append(node())

    result = node()
    skip_ws()
    if pos != n:
        raise TreeError(f"trailing content after tree{where}")
    return result


def gold_tree_from_line(line: str, lineno: int | None = None):
    """Parse one PTB-style bracketed line into (tokens, bracket set).

    Gold trees may be n-ary and stay n-ary: spans are extracted directly,
    no binarization. The first atom inside a paren with further content is
    treated as the constituent label.
    """
    parsed = _parse_sexpr(line.strip(), lineno)
    tokens = []
    spans = set()

    def walk(item):
        if isinstance(item, str):
            tokens.append(item)
            k = len(tokens)
            return k, k
        children = item
        if children and isinstance(children[0], str) and len(children) > 1:
            children = children[1:]   # drop the label
        if not children:
            raise TreeError(f"empty constituent"
                            f"{f' at line {lineno}' if lineno else ''}")
        lo = hi = None
        for child in children:
            s, e = walk(child)
            lo = s if lo is None else lo
            hi = e
        spans.add((lo, hi))
        return lo, hi

    walk(parsed)
    total = (1, len(tokens))
    spans = {(s, e) for s, e in spans if s < e and (s, e) != total}
    return tokens, spans


def pred_tree_from_line(line: str, lineno: int | None = None):
    """Parse one unlabeled bracketed line (our parse output) into
    (tokens, bracket set). Every atom is a leaf."""
    parsed = _parse_sexpr(line.strip(), lineno)
    tokens = []
    spans = set()

    def walk(item):
        if isinstance(item, str):
            tokens.append(item)
            k = len(tokens)
            return k, k
        if not item:
            raise TreeError(f"empty constituent"
                            f"{f' at line {lineno}' if lineno else ''}")
        lo = hi = None
        for child in item:
            s, e = walk(child)
            lo = s if lo is None else lo
            hi = e
        spans.add((lo, hi))
        return lo, hi

    walk(parsed)
    total = (1, len(tokens))
    spans = {(s, e) for s, e in spans if s < e and (s, e) != total}
    return tokens, spans


def read_gold_trees(path):
    """Read one bracketed tree per line; returns [(tokens, spans)]."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(gold_tree_from_line(line, lineno))
    return out
