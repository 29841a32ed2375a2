"""Orbit-based parameter sharing patterns.

Nodes and typed directed edges are partitioned into orbits under the
permutation action of the space group; each orbit gets a color, and every
color indexes one shared weight bank in the model. Orbits are computed with
union-find over the full action table, so the result does not depend on any
generator choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crystal import SymmetryError, is_permutation

EDGE_KINDS = ("h", "k", "l")  # atom->atom, pore->atom, atom->pore


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            self.parent[max(rx, ry)] = min(rx, ry)

    def groups(self):
        out = {}
        for x in range(len(self.parent)):
            out.setdefault(self.find(x), []).append(x)
        return out


@dataclass
class NodeColoring:
    """Per-node color indices; atom and pore namespaces are disjoint."""

    atom_colors: np.ndarray
    pore_colors: np.ndarray
    n_atom_colors: int
    n_pore_colors: int

    @property
    def colors(self):
        return np.concatenate(
            [self.atom_colors, self.pore_colors + self.n_atom_colors]
        ).astype(np.int64)

    @property
    def kind(self):
        return np.array(["atom"] * len(self.atom_colors) + ["pore"] * len(self.pore_colors))

    @property
    def n_colors(self):
        return self.n_atom_colors + self.n_pore_colors


@dataclass
class EdgeColoring:
    """Per-kind color index arrays, parallel to the typed edge lists."""

    colors: dict = field(default_factory=dict)   # kind -> (E,) int array
    counts: dict = field(default_factory=dict)   # kind -> number of colors

    def total_colors(self):
        return sum(self.counts.get(k, 0) for k in EDGE_KINDS)


@dataclass
class SharingPattern:
    """Colored node/edge partition plus the permutation action it came from."""

    n_atoms: int
    n_pores: int
    node_coloring: NodeColoring
    edge_coloring: EdgeColoring
    permutations: list            # per group element: (atom_perm, pore_perm)
    edges: dict                   # kind -> (E, 2) int array of (sender, receiver)

    def edge_count(self, kind):
        return len(self.edges.get(kind, ()))


def node_coloring(perms, n):
    """Color {0..n-1} by orbits of the group generated by the permutations.

    Colors are canonical: the orbit containing the smallest uncolored index
    gets the next color.
    """
    uf = UnionFind(n)
    for perm in perms:
        perm = np.asarray(perm)
        if not is_permutation(perm, n):
            raise ValueError(f"permutation of length {len(perm)} is not a bijection on {n} items")
        for i in range(n):
            uf.union(i, int(perm[i]))
    colors = np.full(n, -1, dtype=np.int64)
    next_color = 0
    for i in range(n):
        if colors[i] < 0:
            root = uf.find(i)
            members = [j for j in range(i, n) if uf.find(j) == root]
            colors[members] = next_color
            next_color += 1
    return colors, next_color


def _pair_key(edge):
    return (int(edge[0]), int(edge[1]))


def edge_coloring_one_kind(sender_perms, receiver_perms, edges, kind="h"):
    """Color directed edges by orbits of the pair action.

    Group element g maps edge (i, j) to (sender_perm[i], receiver_perm[j]);
    the edge list must be closed under this action.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    index = {_pair_key(e): idx for idx, e in enumerate(edges)}
    if len(index) != len(edges):
        raise ValueError(f"duplicate {kind}-edges in edge list")
    uf = UnionFind(len(edges))
    for g, (ps, pr) in enumerate(zip(sender_perms, receiver_perms)):
        for idx, (i, j) in enumerate(edges):
            image = (int(ps[i]), int(pr[j]))
            if image not in index:
                raise SymmetryError(
                    f"{kind}-edge ({int(i)},{int(j)}) maps to missing edge "
                    f"{image} under group element {g}"
                )
            uf.union(idx, index[image])
    members = uf.groups()
    # canonical order: orbits sorted by their lexicographically smallest edge
    orbit_mins = sorted(
        (min(_pair_key(edges[m]) for m in mem), root) for root, mem in members.items()
    )
    color_of_root = {root: c for c, (_, root) in enumerate(orbit_mins)}
    colors = np.array([color_of_root[uf.find(i)] for i in range(len(edges))], dtype=np.int64)
    return colors, len(members)


def edge_coloring(perm_pairs, edges):
    """Color all edge kinds; color namespaces stay disjoint per kind.

    ``perm_pairs`` holds one (atom_perm, pore_perm) per group element;
    ``edges`` maps kind (h/k/l) to an (E, 2) array of (sender, receiver).
    """
    atom_perms = [p[0] for p in perm_pairs]
    pore_perms = [p[1] for p in perm_pairs]
    by_kind = {
        "h": (atom_perms, atom_perms),
        "k": (pore_perms, atom_perms),
        "l": (atom_perms, pore_perms),
    }
    out = EdgeColoring()
    for kind in EDGE_KINDS:
        kind_edges = np.asarray(edges.get(kind, np.zeros((0, 2))), dtype=np.int64).reshape(-1, 2)
        if len(kind_edges) == 0:
            out.colors[kind] = np.zeros(0, dtype=np.int64)
            out.counts[kind] = 0
            continue
        ps, pr = by_kind[kind]
        colors, count = edge_coloring_one_kind(ps, pr, kind_edges, kind)
        out.colors[kind] = colors
        out.counts[kind] = count
    return out


def build_pattern(perm_pairs, n_atoms, n_pores, edges):
    """Assemble the full sharing pattern from the permutation action."""
    for g, (pa, pp) in enumerate(perm_pairs):
        if not is_permutation(pa, n_atoms) or not is_permutation(pp, n_pores):
            raise ValueError(f"group element {g}: permutation sizes do not match node counts")
    atom_colors, n_atom_colors = node_coloring([p[0] for p in perm_pairs], n_atoms)
    pore_colors, n_pore_colors = node_coloring([p[1] for p in perm_pairs], n_pores)
    nodes = NodeColoring(atom_colors, pore_colors, n_atom_colors, n_pore_colors)
    edges = {k: np.asarray(v, dtype=np.int64).reshape(-1, 2) for k, v in edges.items()}
    return SharingPattern(
        n_atoms=n_atoms,
        n_pores=n_pores,
        node_coloring=nodes,
        edge_coloring=edge_coloring(perm_pairs, edges),
        permutations=[(np.asarray(a), np.asarray(p)) for a, p in perm_pairs],
        edges=edges,
    )


def _check_orbit_reachability(colors, action_table, label, violations):
    """Every same-color pair must be connected by explicit group elements."""
    n = len(colors)
    for color in range(int(colors.max()) + 1 if n else 0):
        members = np.flatnonzero(colors == color)
        if len(members) == 0:
            violations.append(f"{label}: color {color} has no members")
            continue
        start = int(members[0])
        reached = {start}
        frontier = [start]
        while frontier:
            x = frontier.pop()
            for row in action_table:
                y = int(row[x])
                if y not in reached:
                    reached.add(y)
                    frontier.append(y)
        for m in members:
            if int(m) not in reached:
                violations.append(
                    f"{label}: color {color} members {start} and {int(m)} "
                    f"are not connected by any group element path"
                )
        for r in reached:
            if colors[r] != color:
                violations.append(
                    f"{label}: orbit of member {start} (color {color}) contains "
                    f"{r} with color {int(colors[r])}"
                )


def validate_pattern(pattern):
    """Check both directions of the orbit/color correspondence.

    Returns a list of violation strings; empty means the pattern is a valid
    equivariant sharing pattern for its permutation action.
    """
    violations = []
    nc = pattern.node_coloring
    atom_tables = [np.asarray(a) for a, _ in pattern.permutations]
    pore_tables = [np.asarray(p) for _, p in pattern.permutations]

    for g, (pa, pp) in enumerate(zip(atom_tables, pore_tables)):
        bad = np.flatnonzero(nc.atom_colors[pa] != nc.atom_colors)
        for i in bad:
            violations.append(
                f"atom colors: element {g} maps atom {int(i)} (color "
                f"{int(nc.atom_colors[i])}) to atom {int(pa[i])} (color {int(nc.atom_colors[pa[i]])})"
            )
        bad = np.flatnonzero(nc.pore_colors[pp] != nc.pore_colors)
        for i in bad:
            violations.append(
                f"pore colors: element {g} maps pore {int(i)} (color "
                f"{int(nc.pore_colors[i])}) to pore {int(pp[i])} (color {int(nc.pore_colors[pp[i]])})"
            )
    _check_orbit_reachability(nc.atom_colors, atom_tables, "atom colors", violations)
    _check_orbit_reachability(nc.pore_colors, pore_tables, "pore colors", violations)

    perm_for_kind = {
        "h": (atom_tables, atom_tables),
        "k": (pore_tables, atom_tables),
        "l": (atom_tables, pore_tables),
    }
    for kind in EDGE_KINDS:
        edges = pattern.edges.get(kind)
        if edges is None or len(edges) == 0:
            continue
        colors = pattern.edge_coloring.colors[kind]
        index = {_pair_key(e): idx for idx, e in enumerate(edges)}
        ps_list, pr_list = perm_for_kind[kind]
        edge_tables = []
        for g, (ps, pr) in enumerate(zip(ps_list, pr_list)):
            table = np.empty(len(edges), dtype=np.int64)
            for idx, (i, j) in enumerate(edges):
                image = (int(ps[i]), int(pr[j]))
                if image not in index:
                    violations.append(
                        f"{kind}-edges: element {g} maps edge ({int(i)},{int(j)}) "
                        f"outside the edge set to {image}"
                    )
                    table[idx] = idx
                    continue
                table[idx] = index[image]
                if colors[index[image]] != colors[idx]:
                    violations.append(
                        f"{kind}-edges: element {g} maps edge ({int(i)},{int(j)}) color "
                        f"{int(colors[idx])} to color {int(colors[index[image]])}"
                    )
            edge_tables.append(table)
        _check_orbit_reachability(colors, edge_tables, f"{kind}-edges", violations)
    return violations
