"""Lattice and space-group geometry for periodic crystals.

Fractional coordinates live in [0, 1). Symmetry operations are stored with an
integer linear part and exact rational translations so group closure does not
drift; floats only appear when geometry is evaluated.
"""

from __future__ import annotations

import warnings
from fractions import Fraction

import numpy as np

# Wrap/dedup tolerance for coordinates produced by exact operations.
TAU_SNAP = 1e-9
# Site matching tolerance (fractional); looser because published coordinates
# are rounded.
TAU_SITE = 1e-3

DEFAULT_MAX_GROUP_ORDER = 192


class SymmetryError(ValueError):
    """Raised when symmetry data is inconsistent (closure, matching, ...)."""


def wrap_fractional(v, tol=TAU_SNAP):
    """Wrap a 3-vector into [0, 1), snapping values within ``tol`` of a
    lattice point to exactly 0."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite fractional coordinate: {v}")
    w = v - np.floor(v)
    w[w > 1.0 - tol] = 0.0
    w[w < tol] = 0.0
    return w


def wrap_half(delta):
    """Wrap fractional difference vector(s) component-wise into [-0.5, 0.5)."""
    delta = np.asarray(delta, dtype=np.float64)
    return delta - np.floor(delta + 0.5)


class Lattice:
    """Three lattice basis vectors in Angstrom, stored as matrix rows."""

    def __init__(self, basis):
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape != (3, 3):
            raise ValueError(f"lattice basis must be 3x3, got {basis.shape}")
        det = np.linalg.det(basis)
        if abs(det) <= 1e-9:
            raise ValueError(f"lattice basis is singular (det={det:g})")
        self.basis = basis
        self.basis.setflags(write=False)
        if not self.is_orthorhombic:
            warnings.warn(
                "non-orthorhombic lattice: component-wise minimum image "
                "convention is approximate for highly skewed cells",
                stacklevel=2,
            )

    @property
    def is_orthorhombic(self):
        off = self.basis - np.diag(np.diag(self.basis))
        return bool(np.all(np.abs(off) < 1e-8))

    def cartesian(self, frac):
        """Fractional row vector(s) -> Cartesian, in Angstrom."""
        return np.asarray(frac, dtype=np.float64) @ self.basis

    def __repr__(self):
        a, b, c = np.linalg.norm(self.basis, axis=1)
        return f"Lattice(a={a:.4f}, b={b:.4f}, c={c:.4f})"


def _as_fraction(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x)
    # floats: only exact small-denominator values are legal for symops
    f = Fraction(x).limit_denominator(24)
    if abs(float(f) - float(x)) > TAU_SNAP:
        raise ValueError(f"translation component {x!r} is not a small-denominator rational")
    return f


class SymOp:
    """Space-group operation x -> W x + t with integer W and rational t.

    Translations are kept modulo full lattice vectors: elements differing by
    a lattice translation act identically on a single unit cell.
    """

    __slots__ = ("W", "t", "_tf")

    def __init__(self, W, t):
        W = np.asarray(W)
        if W.shape != (3, 3):
            raise ValueError(f"W must be 3x3, got {W.shape}")
        Wi = np.rint(W).astype(np.int64)
        if np.max(np.abs(W - Wi)) > TAU_SNAP:
            raise ValueError("W must have integer entries")
        det = int(round(np.linalg.det(Wi)))
        if det == 0:
            raise ValueError("W is singular")
        self.W = Wi
        self.W.setflags(write=False)
        self.t = tuple(_as_fraction(c) % 1 for c in t)
        self._tf = np.array([float(c) for c in self.t])

    @classmethod
    def identity(cls):
        return cls(np.eye(3, dtype=np.int64), (0, 0, 0))

    @property
    def is_identity(self):
        return bool(np.array_equal(self.W, np.eye(3, dtype=np.int64))) and all(
            c == 0 for c in self.t
        )

    def apply(self, x, tol=TAU_SNAP):
        """Apply to fractional coordinate(s); returns wrapped coordinates.

        ``x`` may be a single 3-vector or an (n, 3) array.
        """
        x = np.asarray(x, dtype=np.float64)
        y = x @ self.W.T.astype(np.float64) + self._tf
        if y.ndim == 1:
            return wrap_fractional(y, tol)
        w = y - np.floor(y)
        w[w > 1.0 - tol] = 0.0
        w[w < tol] = 0.0
        return w

    def compose(self, other):
        """Operation equal to applying ``other`` first, then ``self``."""
        W = self.W @ other.W
        t = tuple(
            (sum(int(self.W[i, j]) * other.t[j] for j in range(3)) + self.t[i]) % 1
            for i in range(3)
        )
        return SymOp(W, t)

    def inverse(self):
        Winv = _int_inverse(self.W)
        t = tuple(
            (-sum(int(Winv[i, j]) * self.t[j] for j in range(3))) % 1 for i in range(3)
        )
        return SymOp(Winv, t)

    def key(self):
        return (tuple(self.W.flat), self.t)

    def __eq__(self, other):
        return isinstance(other, SymOp) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        rows = []
        names = "xyz"
        for i in range(3):
            terms = []
            for j in range(3):
                w = int(self.W[i, j])
                if w:
                    s = "-" if w < 0 else ("+" if terms else "")
                    coef = "" if abs(w) == 1 else str(abs(w))
                    terms.append(f"{s}{coef}{names[j]}")
            if self.t[i]:
                terms.append(f"+{self.t[i]}")
            rows.append("".join(terms) or "0")
        return f"SymOp({', '.join(rows)})"


def _int_inverse(W):
    """Exact inverse of an integer 3x3 matrix with det = +/-1 (adjugate)."""
    det = (
        W[0, 0] * (W[1, 1] * W[2, 2] - W[1, 2] * W[2, 1])
        - W[0, 1] * (W[1, 0] * W[2, 2] - W[1, 2] * W[2, 0])
        + W[0, 2] * (W[1, 0] * W[2, 1] - W[1, 1] * W[2, 0])
    )
    det = int(det)
    if det not in (1, -1):
        raise SymmetryError(f"operation linear part has det={det}, expected +/-1")
    adj = np.empty((3, 3), dtype=np.int64)
    for i in range(3):
        for j in range(3):
            minor = [
                [W[r, c] for c in range(3) if c != i] for r in range(3) if r != j
            ]
            cof = minor[0][0] * minor[1][1] - minor[0][1] * minor[1][0]
            adj[i, j] = ((-1) ** (i + j)) * cof
    return adj * det  # division by det == multiplication when det = +/-1


def compose(op1, op2):
    """Compose operations: apply ``op2`` first, then ``op1``."""
    return op1.compose(op2)


def apply_symmetry(op, x, tol=TAU_SNAP):
    return op.apply(x, tol)


class SpaceGroup:
    """Ordered list of symmetry operations; identity first.

    The set must be closed under composition modulo lattice translations and
    contain every inverse.
    """

    def __init__(self, ops, validate=True):
        ops = list(ops)
        if not ops:
            raise SymmetryError("space group needs at least one operation")
        if not ops[0].is_identity:
            raise SymmetryError("first operation must be the identity")
        self.ops = ops
        if validate:
            self._validate()

    def _validate(self):
        keys = {op.key() for op in self.ops}
        if len(keys) != len(self.ops):
            raise SymmetryError("duplicate operations in group")
        for g in self.ops:
            if g.inverse().key() not in keys:
                raise SymmetryError(f"inverse of {g} missing from group")
            for h in self.ops:
                if g.compose(h).key() not in keys:
                    raise SymmetryError(f"group not closed: {g} * {h} escapes the set")

    @property
    def order(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __len__(self):
        return len(self.ops)

    def __getitem__(self, i):
        return self.ops[i]

    @classmethod
    def trivial(cls):
        return cls([SymOp.identity()], validate=False)


def close_group(generators, max_order=DEFAULT_MAX_GROUP_ORDER):
    """Smallest group containing the generators, closed under composition.

    Raises SymmetryError if closure exceeds ``max_order`` (inconsistent
    generators, e.g. irrational-angle rotations).
    """
    ident = SymOp.identity()
    found = {ident.key(): ident}
    frontier = [ident]
    for g in generators:
        if g.key() not in found:
            found[g.key()] = g
            frontier.append(g)
    while frontier:
        new = []
        for g in frontier:
            for h in list(found.values()):
                for prod in (g.compose(h), h.compose(g)):
                    if prod.key() not in found:
                        found[prod.key()] = prod
                        new.append(prod)
                        if len(found) > max_order:
                            raise SymmetryError(
                                f"group closure exceeded max_order={max_order}"
                            )
        frontier = new
    ops = [ident] + [op for key, op in sorted(found.items()) if key != ident.key()]
    return SpaceGroup(ops, validate=False)


def min_image_distance(lattice, x_i, x_j):
    """Distance between fractional points under the minimum image convention.

    Component-wise wrapping of the fractional difference into [-0.5, 0.5);
    exact for orthorhombic cells.
    """
    delta = wrap_half(np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64))
    cart = delta @ lattice.basis
    return float(np.linalg.norm(cart)) if cart.ndim == 1 else np.linalg.norm(cart, axis=-1)


def frac_match(x, y, tol=TAU_SITE):
    """True when two fractional points coincide modulo lattice translations."""
    return bool(np.max(np.abs(wrap_half(np.asarray(x) - np.asarray(y)))) < tol)


def orbit_of_point(group, x, tol=TAU_SITE):
    """Deduplicated images of ``x`` under every group element, as an (m, 3) array."""
    images = []
    for op in group:
        y = op.apply(x)
        if not any(frac_match(y, z, tol) for z in images):
            images.append(y)
    return np.array(images)


class SiteSet:
    """Fixed set of fractional site positions (e.g. zeolite T-sites)."""

    def __init__(self, positions, tol=TAU_SITE):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if positions.shape[1] != 3:
            raise ValueError("positions must be (n, 3)")
        positions = np.array([wrap_fractional(p) for p in positions])
        for i in range(len(positions)):
            for j in range(i + 1, len(positions)):
                if frac_match(positions[i], positions[j], tol):
                    raise ValueError(f"sites {i} and {j} coincide within tol={tol}")
        self.positions = positions
        self.positions.setflags(write=False)
        self.tol = tol

    @property
    def n(self):
        return len(self.positions)

    def match_index(self, point, tol=None):
        """Index of the unique site within ``tol`` of ``point`` (MIC metric)."""
        tol = self.tol if tol is None else tol
        delta = wrap_half(self.positions - np.asarray(point, dtype=np.float64))
        hits = np.flatnonzero(np.max(np.abs(delta), axis=1) < tol)
        if len(hits) == 0:
            raise SymmetryError(f"no site matches point {point} within tol={tol}")
        if len(hits) > 1:
            raise SymmetryError(
                f"ambiguous match for point {point}: sites {hits.tolist()} within tol={tol}"
            )
        return int(hits[0])


def induced_site_permutation(op, sites, tol=None):
    """Permutation ``perm`` with ``op(sites[i]) == sites[perm[i]]``.

    Raises SymmetryError when the operation does not map the site set onto
    itself (no match or ambiguous match).
    """
    tol = sites.tol if tol is None else tol
    perm = np.empty(sites.n, dtype=np.int64)
    for i, pos in enumerate(sites.positions):
        perm[i] = sites.match_index(op.apply(pos), tol)
    if len(set(perm.tolist())) != sites.n:
        raise SymmetryError(f"operation {op} does not permute the site set")
    return perm


def compose_permutations(p, q):
    """Permutation acting like ``p`` after ``q`` (p[q[i]])."""
    return np.asarray(p)[np.asarray(q)]


def invert_permutation(p):
    p = np.asarray(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


def is_permutation(p, n=None):
    p = np.asarray(p, dtype=np.int64).reshape(-1)
    if n is not None and len(p) != n:
        return False
    return bool(np.array_equal(np.sort(p), np.arange(len(p))))
