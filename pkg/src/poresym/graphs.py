"""Crystal graph construction: frameworks, pore nodes, RBF edge features.

A Framework is an immutable description of one crystal topology (lattice,
T-sites, space group, bonds, pores). A CrystalGraph is one Si/Al
configuration on that topology, with typed directed edges:

    h : atom -> atom   (covalent T-T bonds, both directions)
    k : pore -> atom   (one per pore boundary membership)
    l : atom -> pore

Edge features are Gaussian radial basis expansions of minimum-image
distances, so they are exactly shared along symmetry orbits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import coloring
from .crystal import (
    SiteSet,
    SymmetryError,
    TAU_SITE,
    induced_site_permutation,
    min_image_distance,
    wrap_fractional,
    wrap_half,
)

SI, AL = 0, 1
TYPE_CHARS = {"S": SI, "A": AL}

# Feature normalization keeps pore descriptors O(1).
PORE_AREA_SCALE = 100.0
PORE_BOUNDARY_SCALE = 12.0

DEFAULT_BOND_CUTOFF = 3.5  # Angstrom, T-T through-oxygen bridges sit near 3.1


@dataclass(frozen=True)
class RbfConfig:
    """Gaussian radial basis expansion: exp(-gamma * (d - mu_k)^2)."""

    centers: tuple = tuple(np.linspace(0.0, 8.0, 16))
    gamma: float = 10.0

    def __post_init__(self):
        mu = np.asarray(self.centers, dtype=np.float64)
        if mu.size < 1:
            raise ValueError("need at least one RBF center")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if mu.size > 1 and not np.all(np.diff(mu) > 0):
            raise ValueError("RBF centers must be strictly increasing")
        object.__setattr__(self, "centers", tuple(float(c) for c in mu))

    @property
    def size(self):
        return len(self.centers)


def rbf_embed(d, cfg):
    """Expand distance(s) d (Angstrom) into RBF feature vectors in (0, 1]."""
    d = np.asarray(d, dtype=np.float64)
    mu = np.asarray(cfg.centers)
    return np.exp(-cfg.gamma * (d[..., None] - mu) ** 2)


class Pore:
    """Channel/cavity node: center, diffusion cross-section area, boundary atoms."""

    __slots__ = ("center", "area", "boundary")

    def __init__(self, center, area, boundary):
        self.center = wrap_fractional(np.asarray(center, dtype=np.float64))
        self.center.setflags(write=False)
        if not area > 0:
            raise ValueError(f"pore area must be positive, got {area}")
        self.area = float(area)
        boundary = tuple(int(b) for b in boundary)
        if not boundary:
            raise ValueError("pore boundary must be nonempty")
        if len(set(boundary)) != len(boundary):
            raise ValueError("pore boundary contains duplicate atom indices")
        self.boundary = tuple(sorted(boundary))

    def __repr__(self):
        return f"Pore(center={np.round(self.center, 4).tolist()}, area={self.area:g}, n_boundary={len(self.boundary)})"


class Framework:
    """One crystal topology; validated so that every group element permutes
    sites, bonds and pores onto themselves."""

    def __init__(self, name, lattice, sites, group, bonds=None, pores=None, validate=True):
        self.name = str(name)
        self.lattice = lattice
        self.sites = sites if isinstance(sites, SiteSet) else SiteSet(sites)
        self.group = group
        self.bonds = _normalize_bonds(bonds or [], self.sites.n)
        self.pores = list(pores or [])
        for p, pore in enumerate(self.pores):
            for b in pore.boundary:
                if not 0 <= b < self.sites.n:
                    raise ValueError(f"pore {p} boundary index {b} out of range")
        self.atom_permutations = [
            induced_site_permutation(op, self.sites) for op in self.group
        ]
        self.pore_permutations = [
            self._induced_pore_permutation(g) for g in range(len(self.group))
        ]
        if validate:
            self._validate_bonds()
            self._validate_pores()
            self._validate_isometry()

    @property
    def n_sites(self):
        return self.sites.n

    @property
    def n_pores(self):
        return len(self.pores)

    def _induced_pore_permutation(self, g):
        op = self.group[g]
        centers = np.array([p.center for p in self.pores]).reshape(-1, 3)
        perm = np.empty(len(self.pores), dtype=np.int64)
        for i, pore in enumerate(self.pores):
            image = op.apply(pore.center)
            delta = wrap_half(centers - image)
            hits = np.flatnonzero(np.max(np.abs(delta), axis=1) < TAU_SITE) if len(centers) else []
            if len(hits) != 1:
                raise SymmetryError(
                    f"group element {g} does not map pore {i} onto a unique pore "
                    f"(matches: {list(map(int, hits))})"
                )
            perm[i] = int(hits[0])
        if len(set(perm.tolist())) != len(self.pores):
            raise SymmetryError(f"group element {g} does not permute the pore set")
        return perm

    def _validate_bonds(self):
        bond_set = {tuple(b) for b in self.bonds}
        for g, perm in enumerate(self.atom_permutations):
            for (i, j) in self.bonds:
                image = tuple(sorted((int(perm[i]), int(perm[j]))))
                if image not in bond_set:
                    raise SymmetryError(
                        f"bond ({i},{j}) maps to missing bond {image} under group element {g}"
                    )

    def _validate_pores(self):
        for g, (aperm, pperm) in enumerate(zip(self.atom_permutations, self.pore_permutations)):
            for i, pore in enumerate(self.pores):
                mate = self.pores[int(pperm[i])]
                if abs(mate.area - pore.area) > 1e-6 * max(1.0, abs(pore.area)):
                    raise SymmetryError(
                        f"group element {g} maps pore {i} (area {pore.area}) onto pore "
                        f"{int(pperm[i])} (area {mate.area})"
                    )
                image_boundary = tuple(sorted(int(aperm[b]) for b in pore.boundary))
                if image_boundary != mate.boundary:
                    raise SymmetryError(
                        f"group element {g} maps pore {i} boundary onto {image_boundary}, "
                        f"but pore {int(pperm[i])} has boundary {mate.boundary}"
                    )

    def _validate_isometry(self, tol=1e-9):
        pairs = list(self.bonds)[:256]
        pos = self.sites.positions
        for g, op in enumerate(self.group):
            for (i, j) in pairs:
                d0 = min_image_distance(self.lattice, pos[i], pos[j])
                d1 = min_image_distance(self.lattice, op.apply(pos[i]), op.apply(pos[j]))
                if abs(d0 - d1) > tol:
                    raise SymmetryError(
                        f"group element {g} changes distance ({i},{j}): {d0!r} -> {d1!r}"
                    )

    def with_bonds(self, bonds):
        return Framework(
            self.name, self.lattice, self.sites, self.group, bonds, self.pores
        )

    # canonical typed edge lists, shared by sharing_pattern and build_graph
    def h_edges(self):
        out = []
        for (i, j) in self.bonds:
            out.append((i, j))
            out.append((j, i))
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)

    def k_edges(self):
        out = [(p, a) for p, pore in enumerate(self.pores) for a in pore.boundary]
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)

    def l_edges(self):
        out = [(a, p) for p, pore in enumerate(self.pores) for a in pore.boundary]
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)

    def edge_lists(self, with_pores=True):
        if with_pores:
            return {"h": self.h_edges(), "k": self.k_edges(), "l": self.l_edges()}
        return {"h": self.h_edges(), "k": np.zeros((0, 2), np.int64), "l": np.zeros((0, 2), np.int64)}

    def sharing_pattern(self, with_pores=True):
        """Orbit coloring of nodes and typed edges under the group action."""
        n_pores = self.n_pores if with_pores else 0
        perm_pairs = [
            (a, (p if with_pores else np.zeros(0, dtype=np.int64)))
            for a, p in zip(self.atom_permutations, self.pore_permutations)
        ]
        return coloring.build_pattern(
            perm_pairs, self.n_sites, n_pores, self.edge_lists(with_pores)
        )

    def __repr__(self):
        return (
            f"Framework({self.name!r}, sites={self.n_sites}, group_order={len(self.group)}, "
            f"bonds={len(self.bonds)}, pores={self.n_pores})"
        )


def _normalize_bonds(bonds, n_sites):
    seen = set()
    out = []
    for (i, j) in bonds:
        i, j = int(i), int(j)
        if i == j:
            raise ValueError(f"self-loop bond ({i},{j})")
        if not (0 <= i < n_sites and 0 <= j < n_sites):
            raise ValueError(f"bond ({i},{j}) references invalid site index")
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return sorted(out)


def derive_bonds(framework, cutoff=DEFAULT_BOND_CUTOFF):
    """All unordered site pairs closer than ``cutoff`` under minimum image.

    The result is closed under the space group by construction, since group
    elements are isometries. Warns about atoms left without neighbors.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = framework.sites.positions
    n = len(pos)
    bonds = []
    degree = np.zeros(n, dtype=int)
    for i in range(n):
        d = min_image_distance(framework.lattice, pos[i], pos[i + 1 :])
        for off, dist in enumerate(np.atleast_1d(d)):
            if dist < cutoff:
                j = i + 1 + off
                bonds.append((i, j))
                degree[i] += 1
                degree[j] += 1
    lonely = np.flatnonzero(degree == 0)
    if len(lonely):
        warnings.warn(
            f"derive_bonds: sites {lonely.tolist()} have no neighbors within {cutoff} A",
            stacklevel=2,
        )
    return bonds


class Occupancy:
    """Si/Al assignment for every T-site, in framework site order."""

    __slots__ = ("types",)

    def __init__(self, types):
        types = np.asarray(types, dtype=np.int64)
        if types.ndim != 1:
            raise ValueError("occupancy must be one-dimensional")
        if not np.all((types == SI) | (types == AL)):
            raise ValueError("occupancy entries must be Si (0) or Al (1)")
        self.types = types
        self.types.setflags(write=False)

    @classmethod
    def from_string(cls, s):
        try:
            return cls([TYPE_CHARS[c] for c in s])
        except KeyError as err:
            raise ValueError(f"bad occupancy character {err.args[0]!r} (expected S or A)") from None

    def to_string(self):
        return "".join("A" if t == AL else "S" for t in self.types)

    @property
    def n_al(self):
        return int(np.sum(self.types == AL))

    def __len__(self):
        return len(self.types)

    def __eq__(self, other):
        return isinstance(other, Occupancy) and np.array_equal(self.types, other.types)

    def permuted(self, atom_perm):
        """Occupancy after moving each atom i to site atom_perm[i]."""
        out = np.empty_like(self.types)
        out[np.asarray(atom_perm)] = self.types
        return Occupancy(out)

    def one_hot(self):
        eye = np.eye(2, dtype=np.float64)
        return eye[self.types]


@dataclass
class CrystalGraph:
    """One configuration's graph: features plus typed edges and RBF features."""

    framework_name: str
    n_atoms: int
    n_pores: int
    atom_features: np.ndarray          # (n_atoms, 2) one-hot
    pore_features: np.ndarray          # (n_pores, 2) scaled (area, boundary count)
    edges: dict                        # kind -> (E, 2) (sender, receiver)
    edge_features: dict                # kind -> (E, K)
    with_pores: bool = True
    rbf: RbfConfig = field(default_factory=RbfConfig)


def build_graph(framework, occupancy, cfg=None, with_pores=True):
    """Build the typed crystal graph for one occupancy.

    Only T-sites become atom nodes (bridging oxygens are fixed and carry no
    configuration information). Pore nodes connect to every boundary atom via
    one k-edge and one l-edge.
    """
    cfg = cfg or RbfConfig()
    if len(occupancy) != framework.n_sites:
        raise ValueError(
            f"occupancy length {len(occupancy)} does not match framework "
            f"site count {framework.n_sites}"
        )
    pos = framework.sites.positions
    edges = framework.edge_lists(with_pores)

    h = edges["h"]
    h_dist = np.array(
        [min_image_distance(framework.lattice, pos[i], pos[j]) for i, j in h]
    )
    feats = {"h": rbf_embed(h_dist, cfg)}

    if with_pores and framework.n_pores:
        centers = np.array([p.center for p in framework.pores])
        k = edges["k"]
        k_dist = np.array(
            [min_image_distance(framework.lattice, centers[p], pos[a]) for p, a in k]
        )
        feats["k"] = rbf_embed(k_dist, cfg)
        l = edges["l"]
        l_dist = np.array(
            [min_image_distance(framework.lattice, pos[a], centers[p]) for a, p in l]
        )
        feats["l"] = rbf_embed(l_dist, cfg)
        pore_features = np.array(
            [
                [p.area / PORE_AREA_SCALE, len(p.boundary) / PORE_BOUNDARY_SCALE]
                for p in framework.pores
            ]
        )
        n_pores = framework.n_pores
    else:
        feats["k"] = np.zeros((0, cfg.size))
        feats["l"] = np.zeros((0, cfg.size))
        pore_features = np.zeros((0, 2))
        n_pores = 0

    return CrystalGraph(
        framework_name=framework.name,
        n_atoms=framework.n_sites,
        n_pores=n_pores,
        atom_features=occupancy.one_hot(),
        pore_features=pore_features,
        edges=edges,
        edge_features=feats,
        with_pores=with_pores,
    )
