"""Enumeration of pattern matches: injective embeddings of chain patterns
into the operator graph."""

from __future__ import annotations

from dataclasses import dataclass

from .model_ir import ELEMENTWISE_OPS, Graph
from .platform import Platform, pattern_supports


@dataclass(frozen=True)
class Match:
    """One embedding of a pattern chain into the graph."""

    id: int
    pattern: str
    nodes: tuple  # operator names, chain order

    @property
    def covered(self):
        return frozenset(self.nodes)


def _chain_extensions(g: Graph, op_name):
    """Operators a fused chain may extend to from ``op_name``.

    The connecting tensor must be an intermediate with exactly one consumer
    (fusing it must not hide data another operator or the outside world
    needs), and the continuation must be pointwise so that every member of
    the chain shares the anchor's tiling axis extent.
    """
    op = g.by_name[op_name]
    out = op.output
    if g.tensors[out].kind != "intermediate":
        return []
    consumers = g.consumers.get(out, ())
    if len(consumers) != 1:
        return []
    nxt = g.by_name[consumers[0]]
    if nxt.op_type not in ELEMENTWISE_OPS:
        return []
    if nxt.tile_extent != op.tile_extent or nxt.tile_axis != op.tile_axis:
        return []
    return [nxt.name]


def enumerate_matches(g: Graph, plat: Platform):
    """All embeddings of every catalogue pattern, plus one wildcard match
    per operator.  Output order is canonical: (pattern name, anchor name)."""
    found = []
    for pattern in plat.catalogue:
        if pattern.is_wildcard:
            for name in g.topo_order:
                found.append((pattern.name, (name,)))
            continue
        for anchor in g.topo_order:
            chains = [(anchor,)]
            for _ in range(pattern.length - 1):
                extended = []
                for chain in chains:
                    for nxt in _chain_extensions(g, chain[-1]):
                        if nxt not in chain:  # injectivity
                            extended.append(chain + (nxt,))
                chains = extended
            for chain in chains:
                ops = [g.by_name[n] for n in chain]
                if pattern_supports(pattern, ops, g.tensors):
                    found.append((pattern.name, chain))
    found.sort(key=lambda item: (item[0], item[1][0], item[1]))
    return [Match(i, pat, nodes) for i, (pat, nodes) in enumerate(found)]


def matches_covering(matches, op_name):
    return [m for m in matches if op_name in m.covered]
