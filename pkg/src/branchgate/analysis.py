"""Connectivity graphs, pruning of dead blocks and branching statistics.

A block is alive when it lies on a stem-to-head path under the frozen binary
gates. Dead blocks either feed nothing downstream or receive nothing from the
stem, so removing them leaves the network function unchanged.
"""
import copy
import json
from dataclasses import dataclass

import numpy as np

from .errors import GateError

STEM = "stem"
HEAD = "head"


@dataclass
class ConnectivityGraph:
    """Blocks ``(module, block)`` with gate edges between adjacent modules.

    ``edges`` holds ``(i - 1, k, i, j)`` for every active gate
    ``g^(i)_{j,k} = 1``; the stem feeds every first-module block and every
    last-module block feeds the head.
    """

    cardinality: int
    num_modules: int
    nodes: tuple  # sorted (module, block)
    edges: tuple  # sorted (i - 1, k, i, j)
    alive: frozenset

    def is_alive(self, module, block):
        return (module, block) in self.alive

    def in_edges(self, module, block):
        return [e for e in self.edges if e[2] == module and e[3] == block]

    def out_edges(self, module, block):
        return [e for e in self.edges if e[0] == module and e[1] == block]


def compute_alive(nodes, edges, num_modules):
    """Forward reachability from the stem intersected with backward reachability from the head."""
    by_module = [sorted(j for i, j in nodes if i == m) for m in range(num_modules)]
    fwd = {(0, j) for j in by_module[0]} if num_modules else set()
    for m in range(1, num_modules):
        fwd |= {(m, j) for (a, k, b, j) in edges if b == m and (a, k) in fwd}
    bwd = {(num_modules - 1, j) for j in by_module[-1]} if num_modules else set()
    for m in range(num_modules - 2, -1, -1):
        bwd |= {(m, k) for (a, k, b, j) in edges if a == m and (b, j) in bwd}
    return frozenset(fwd & bwd)


def build_graph(net):
    """Graph of ``net``'s binary gates; requires deterministic (frozen) connectivity."""
    if not net.frozen:
        raise GateError(f"connectivity is {net.connectivity!r}; freeze the gates before building a graph")
    nodes = tuple(sorted((i, j) for i, mod in enumerate(net.modules) for j in mod.blocks))
    present = set(nodes)
    edges = []
    for i, mod in enumerate(net.modules):
        if i == 0:
            continue
        for j in sorted(mod.blocks):
            g = mod.gates[j].binary_gates
            edges.extend((i - 1, int(k), i, j) for k in np.flatnonzero(g) if (i - 1, int(k)) in present)
    edges = tuple(sorted(edges))
    return ConnectivityGraph(
        net.spec.cardinality, len(net.modules), nodes, edges, compute_alive(nodes, edges, len(net.modules))
    )


def prune(net):
    """Copy of ``net`` without its dead blocks; a projection is kept while its module has a live block."""
    graph = build_graph(net)
    out = copy.deepcopy(net)
    for i, mod in enumerate(out.modules):
        for j in list(mod.blocks):
            if (i, j) not in graph.alive:
                del mod.blocks[j]
                del mod.gates[j]
        if not mod.blocks:
            mod.projection = None
    return out


def branch_histogram(graph):
    """Number of alive blocks per module."""
    counts = [0] * graph.num_modules
    for i, _ in graph.alive:
        counts[i] += 1
    return counts


def graph_to_dict(graph):
    return {
        "cardinality": graph.cardinality,
        "num_modules": graph.num_modules,
        "nodes": [{"module": i, "block": j, "alive": (i, j) in graph.alive} for i, j in graph.nodes],
        "edges": [list(e) for e in graph.edges],
    }


def graph_from_json(text):
    """Rebuild a graph from :func:`export_graph` JSON; alive flags are recomputed and checked."""
    d = json.loads(text)
    nodes = tuple(sorted((n["module"], n["block"]) for n in d["nodes"]))
    edges = tuple(sorted(tuple(e) for e in d["edges"]))
    alive = compute_alive(nodes, edges, d["num_modules"])
    stated = frozenset((n["module"], n["block"]) for n in d["nodes"] if n["alive"])
    if stated != alive:
        raise GateError("alive flags in the graph file disagree with its edges")
    return ConnectivityGraph(d["cardinality"], d["num_modules"], nodes, edges, alive)


def _dot_id(i, j):
    return f"m{i}_b{j}"


def export_graph(graph, fmt="dot"):
    """Deterministic DOT or JSON text for ``graph``."""
    if fmt == "json":
        return json.dumps(graph_to_dict(graph), sort_keys=True, indent=1) + "\n"
    if fmt != "dot":
        raise ValueError(f"unknown format {fmt!r} (expected dot or json)")
    lines = ["digraph connectivity {", "  rankdir=LR;", f"  {STEM} [shape=box];", f"  {HEAD} [shape=box];"]
    for m in range(graph.num_modules):
        lines.append(f"  subgraph module_{m} {{")
        lines.append("    rank=same;")
        for i, j in graph.nodes:
            if i == m:
                style = "solid" if (i, j) in graph.alive else "dashed"
                lines.append(f'    {_dot_id(i, j)} [label="{i}:{j}", style={style}];')
        lines.append("  }")
    for i, j in graph.nodes:
        if i == 0:
            lines.append(f"  {STEM} -> {_dot_id(i, j)};")
    for a, k, b, j in graph.edges:
        lines.append(f"  {_dot_id(a, k)} -> {_dot_id(b, j)};")
    for i, j in graph.nodes:
        if i == graph.num_modules - 1:
            lines.append(f"  {_dot_id(i, j)} -> {HEAD};")
    lines.append("}")
    return "\n".join(lines) + "\n"
