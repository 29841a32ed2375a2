"""File formats and dataset mechanics.

Framework file grammar (line-oriented, ``#`` comments and blank lines are
ignored, one ``poresym-framework v1`` header line first):

    poresym-framework v1
    name MOR
    lattice            # exactly three basis-vector rows, Angstrom
    18.256 0 0
    0 20.534 0
    0 0 7.542
    sites 48           # fractional coordinates, one per line
    0.304900 0.072300 0.044400
    ...
    symops 16          # nine integers (W row-major) + three rationals (t)
    1 0 0 0 1 0 0 0 1 0 0 0
    -1 0 0 0 -1 0 0 0 1 0 0 1/2
    ...
    pores 4            # center(3) area : boundary site indices
    0.25 0.25 0.25 34.6 : 0 3 5 7
    ...
    bonds 96           # optional; unordered site-index pairs
    0 5
    ...

Configuration CSV: header ``id,occupancy,hoa``; occupancy is a string over
{S, A} keyed to framework site order; hoa in kJ/mol.

Split manifest CSV: header ``id,partition`` with partition train|test.

Splits and synthetic data use numpy's PCG64 generator, so they are
reproducible from their integer seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .crystal import Lattice, SiteSet, SpaceGroup, SymOp
from .graphs import DEFAULT_BOND_CUTOFF, Framework, Occupancy, Pore, derive_bonds

FRAMEWORK_HEADER = "poresym-framework v1"


class ParseError(ValueError):
    pass


# ------------------------------------------------------------ framework file


def _content_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def load_framework(path, bond_cutoff=DEFAULT_BOND_CUTOFF):
    """Parse and fully validate a framework file.

    When the file carries no ``bonds`` section, bonds are derived with the
    minimum-image distance cutoff (default 3.5 A for T-T).
    """
    with open(path) as fh:
        text = fh.read()
    lines = list(_content_lines(text))
    if not lines or lines[0][1] != FRAMEWORK_HEADER:
        raise ParseError(f"{path}: missing '{FRAMEWORK_HEADER}' header line")

    name = None
    lattice = None
    sites = None
    ops = None
    pores = []
    bonds = None

    pos = 1

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"{path}: unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    def fail(lineno, msg):
        raise ParseError(f"{path}:{lineno}: {msg}")

    while pos < len(lines):
        lineno, line = take()
        fields = line.split()
        section = fields[0]
        if section == "name":
            if len(fields) < 2:
                fail(lineno, "name line needs a value")
            name = " ".join(fields[1:])
        elif section == "lattice":
            rows = []
            for _ in range(3):
                ln, row = take()
                vals = row.split()
                if len(vals) != 3:
                    fail(ln, f"lattice row needs 3 numbers, got {len(vals)}")
                rows.append([float(v) for v in vals])
            lattice = Lattice(rows)
        elif section == "sites":
            count = _section_count(fields, lineno, fail)
            rows = []
            for _ in range(count):
                ln, row = take()
                vals = row.split()
                if len(vals) != 3:
                    fail(ln, f"site row needs 3 coordinates, got {len(vals)}")
                rows.append([float(v) for v in vals])
            sites = SiteSet(rows)
        elif section == "symops":
            count = _section_count(fields, lineno, fail)
            ops = []
            for _ in range(count):
                ln, row = take()
                vals = row.split()
                if len(vals) != 12:
                    fail(ln, f"symop row needs 12 entries (9 W + 3 t), got {len(vals)}")
                try:
                    W = np.array([int(v) for v in vals[:9]]).reshape(3, 3)
                    t = tuple(Fraction(v) for v in vals[9:])
                except ValueError as err:
                    fail(ln, f"bad symop entry: {err}")
                ops.append(SymOp(W, t))
        elif section == "pores":
            count = _section_count(fields, lineno, fail)
            for _ in range(count):
                ln, row = take()
                if ":" not in row:
                    fail(ln, "pore row needs 'center area : boundary indices'")
                head, tail = row.split(":", 1)
                vals = head.split()
                if len(vals) != 4:
                    fail(ln, f"pore row needs 3 center coords + area, got {len(vals)}")
                try:
                    center = [float(v) for v in vals[:3]]
                    area = float(vals[3])
                    boundary = [int(v) for v in tail.split()]
                    pores.append(Pore(center, area, boundary))
                except ValueError as err:
                    fail(ln, f"bad pore row: {err}")
        elif section == "bonds":
            count = _section_count(fields, lineno, fail)
            bonds = []
            for _ in range(count):
                ln, row = take()
                vals = row.split()
                if len(vals) != 2:
                    fail(ln, f"bond row needs 2 site indices, got {len(vals)}")
                bonds.append((int(vals[0]), int(vals[1])))
        else:
            fail(lineno, f"unknown section {section!r}")

    for label, value in (("name", name), ("lattice", lattice), ("sites", sites), ("symops", ops)):
        if value is None:
            raise ParseError(f"{path}: missing required section {label!r}")

    group = SpaceGroup(ops)
    if bonds is not None:
        return Framework(name, lattice, sites, group, bonds, pores)
    skeleton = Framework(name, lattice, sites, group, [], pores, validate=False)
    return Framework(name, lattice, sites, group, derive_bonds(skeleton, bond_cutoff), pores)


def _section_count(fields, lineno, fail):
    if len(fields) != 2:
        fail(lineno, f"section header {fields[0]!r} needs a count")
    try:
        return int(fields[1])
    except ValueError:
        fail(lineno, f"bad section count {fields[1]!r}")


def write_framework(path, framework, include_bonds=False):
    """Emit the canonical framework file (inverse of load_framework)."""
    out = [FRAMEWORK_HEADER, f"name {framework.name}", "lattice"]
    for row in framework.lattice.basis:
        out.append(" ".join(f"{v:.6f}" for v in row))
    out.append(f"sites {framework.n_sites}")
    for site in framework.sites.positions:
        out.append(" ".join(f"{v:.6f}" for v in site))
    out.append(f"symops {len(framework.group)}")
    for op in framework.group:
        entries = [str(int(w)) for w in op.W.flat] + [str(t) for t in op.t]
        out.append(" ".join(entries))
    if framework.pores:
        out.append(f"pores {framework.n_pores}")
        for pore in framework.pores:
            center = " ".join(f"{v:.6f}" for v in pore.center)
            boundary = " ".join(str(b) for b in pore.boundary)
            out.append(f"{center} {pore.area:.4f} : {boundary}")
    if include_bonds and framework.bonds:
        out.append(f"bonds {len(framework.bonds)}")
        for i, j in framework.bonds:
            out.append(f"{i} {j}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# -------------------------------------------------------------- labeled data


@dataclass
class LabeledConfig:
    id: str
    occupancy: Occupancy
    hoa: float    # heat of adsorption, kJ/mol


@dataclass
class Dataset:
    framework_name: str
    configs: list
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    split_seed: int | None = None

    def by_id(self, ids):
        table = {c.id: c for c in self.configs}
        return [table[i] for i in ids]

    @property
    def has_split(self):
        return bool(self.train_ids or self.test_ids)


def load_configurations(path, framework):
    """Read a configuration CSV; every row is validated against the framework."""
    configs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "occupancy", "hoa"]:
            raise ParseError(f"{path}: expected header 'id,occupancy,hoa', got {header}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: row {rownum}: expected 3 fields, got {len(row)}")
            cid, occ_str, hoa_str = (f.strip() for f in row)
            if len(occ_str) != framework.n_sites:
                raise ParseError(
                    f"{path}: row {rownum}: occupancy length {len(occ_str)} != "
                    f"site count {framework.n_sites}"
                )
            try:
                occ = Occupancy.from_string(occ_str)
            except ValueError as err:
                raise ParseError(f"{path}: row {rownum}: {err}") from None
            try:
                hoa = float(hoa_str)
            except ValueError:
                raise ParseError(f"{path}: row {rownum}: bad label {hoa_str!r}") from None
            if not np.isfinite(hoa):
                raise ParseError(f"{path}: row {rownum}: non-finite label {hoa_str!r}")
            configs.append(LabeledConfig(cid, occ, hoa))
    return configs


def write_configurations(path, configs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "occupancy", "hoa"])
        for c in configs:
            writer.writerow([c.id, c.occupancy.to_string(), repr(c.hoa)])


def al_histogram(configs):
    """Count of configurations per aluminium substitution count."""
    counts = {}
    for c in configs:
        counts[c.occupancy.n_al] = counts.get(c.occupancy.n_al, 0) + 1
    return dict(sorted(counts.items()))


# --------------------------------------------------------------------- split


def split_dataset(framework_name, configs, train_frac=0.9, seed=0):
    """Seeded uniform shuffle; first floor(train_frac * N) ids go to train."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    ids = [c.id for c in configs]
    if len(ids) != len(set(ids)):
        raise ValueError("configuration ids are not unique")
    rng = np.random.default_rng(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    n_train = int(np.floor(train_frac * len(ids)))
    train_ids = [ids[i] for i in order[:n_train]]
    test_ids = [ids[i] for i in order[n_train:]]
    return Dataset(framework_name, list(configs), train_ids, test_ids, seed)


def write_split_manifest(path, dataset):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "partition"])
        for cid in dataset.train_ids:
            writer.writerow([cid, "train"])
        for cid in dataset.test_ids:
            writer.writerow([cid, "test"])


def load_split_manifest(path):
    train_ids, test_ids = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "partition"]:
            raise ParseError(f"{path}: expected header 'id,partition', got {header}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            cid, part = row[0].strip(), row[1].strip()
            if part == "train":
                train_ids.append(cid)
            elif part == "test":
                test_ids.append(cid)
            else:
                raise ParseError(f"{path}: row {rownum}: unknown partition {part!r}")
    return train_ids, test_ids


# ---------------------------------------------------------- synthetic oracle


@dataclass
class SynthOracle:
    """Exactly group-invariant label function over occupancies.

    label = bias + sum over Al atoms of node_weights[atom color]
                 + sum over directed atom-atom edges with both ends Al of
                   edge_weights[edge color]
                 + sum over pores of pore_weights[pore color] * (Al count on
                   the pore boundary)
                 + Gaussian noise (sigma).

    With sigma = 0 the label is exactly invariant: colors are constant on
    orbits and group elements permute atoms, edges and pores bijectively.
    """

    node_weights: np.ndarray
    edge_weights: np.ndarray
    pore_weights: np.ndarray
    bias: float = -20.0
    sigma: float = 0.0

    def label(self, pattern, occupancy, rng=None):
        al = occupancy.types == 1
        value = self.bias
        value += float(np.sum(self.node_weights[pattern.node_coloring.atom_colors[al]]))
        edges = pattern.edges["h"]
        if len(edges):
            both = al[edges[:, 0]] & al[edges[:, 1]]
            value += float(
                np.sum(self.edge_weights[pattern.edge_coloring.colors["h"][both]])
            )
        if len(self.pore_weights) and pattern.n_pores:
            k_edges = pattern.edges["k"]
            al_on_boundary = np.bincount(
                k_edges[:, 0], weights=al[k_edges[:, 1]].astype(float), minlength=pattern.n_pores
            )
            value += float(
                np.sum(self.pore_weights[pattern.node_coloring.pore_colors] * al_on_boundary)
            )
        if self.sigma > 0:
            if rng is None:
                raise ValueError("noise sigma > 0 needs an rng")
            value += float(rng.normal(0.0, self.sigma))
        return value


def make_synth_oracle(pattern, seed=0, node_scale=2.0, edge_scale=0.5, pore_scale=0.0, bias=-20.0, sigma=0.0):
    """Sample per-color oracle weights; pore term off unless pore_scale > 0."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    nc = pattern.node_coloring
    node_w = rng.normal(-1.0, 1.0, nc.n_atom_colors) * node_scale
    edge_w = rng.normal(0.0, 1.0, pattern.edge_coloring.counts["h"]) * edge_scale
    pore_w = (
        rng.normal(0.0, 1.0, nc.n_pore_colors) * pore_scale
        if pore_scale > 0
        else np.zeros(nc.n_pore_colors)
    )
    return SynthOracle(node_w, edge_w, pore_w, bias, sigma)


def synth_generate(framework, pattern, n_configs, max_al=12, seed=0, oracle=None, **oracle_kwargs):
    """Sample occupancies (Al counts uniform in [0, max_al]) with oracle labels."""
    if oracle is None:
        oracle = make_synth_oracle(pattern, seed=seed, **oracle_kwargs)
    rng = np.random.default_rng(np.random.PCG64(seed + 1))
    n = framework.n_sites
    if not 0 <= max_al <= n:
        raise ValueError(f"max_al must be in [0, {n}]")
    configs = []
    for k in range(n_configs):
        n_al = int(rng.integers(0, max_al + 1))
        types = np.zeros(n, dtype=np.int64)
        if n_al:
            types[rng.choice(n, size=n_al, replace=False)] = 1
        occ = Occupancy(types)
        configs.append(
            LabeledConfig(f"synth-{k:05d}", occ, oracle.label(pattern, occ, rng))
        )
    return configs, oracle
