"""Coefficient fields, continuum labels, sources and boundary cases.

Coefficients are piecewise constant per fine cell, sampled at cell
centers.  Continuum labels are 1-based integers per fine cell; the
indicator of continuum j plays the role of the averaging weight in the
cell problems, so every continuum must appear in every coarse block
that is used as an RVE.
"""

import numpy as np

__all__ = [
    "CellField",
    "ContinuumMap",
    "SourceSpec",
    "BoundaryCase",
    "layered_field",
    "circular_field",
    "constant_field",
    "gaussian_source",
    "validate_continua",
]


class CellField:
    """Strictly positive scalar field, one value per fine cell."""

    def __init__(self, values):
        v = np.asarray(values, dtype=float)
        if v.ndim != 1:
            raise ValueError("cell field must be one-dimensional")
        if not np.all(v > 0.0):
            raise ValueError("cell field values must be strictly positive")
        self.values = v

    def __len__(self):
        return self.values.size


class ContinuumMap:
    """Per-cell continuum labels in {1..N}."""

    def __init__(self, labels, n_continua):
        lab = np.asarray(labels, dtype=np.int64)
        n = int(n_continua)
        if n < 1:
            raise ValueError("need at least one continuum")
        if lab.min() < 1 or lab.max() > n:
            raise ValueError("labels must lie in 1..%d" % n)
        self.labels = lab
        self.n_continua = n

    def indicator(self, j):
        """Boolean mask of cells belonging to continuum j (1-based)."""
        if not 1 <= j <= self.n_continua:
            raise ValueError("continuum index %r out of range" % j)
        return self.labels == j


class SourceSpec:
    """Gaussian bump amplitude * exp(-decay * |x - center|^2)."""

    def __init__(self, amplitude, center, decay):
        if decay <= 0.0:
            raise ValueError("decay must be positive")
        self.amplitude = float(amplitude)
        self.center = (float(center[0]), float(center[1]))
        self.decay = float(decay)

    def evaluate(self, points):
        """Evaluate at an (n, 2) array of points."""
        p = np.asarray(points, dtype=float)
        d2 = (p[:, 0] - self.center[0]) ** 2 + (p[:, 1] - self.center[1]) ** 2
        return self.amplitude * np.exp(-self.decay * d2)


_PRESSURE_BCS = ("dirichlet_zero", "dirichlet_linear_x")
_CONCENTRATION_BCS = ("dirichlet_zero", "neumann_zero")

# the three experiment cases: (pressure bc, concentration bc)
_CASES = {
    1: ("dirichlet_zero", "dirichlet_zero"),
    2: ("dirichlet_linear_x", "dirichlet_zero"),
    3: ("dirichlet_linear_x", "neumann_zero"),
}


class BoundaryCase:
    """Boundary condition pair for the flow and transport equations.

    Only the three studied combinations are allowed: zero Dirichlet for
    both (case 1), p = x with zero Dirichlet concentration (case 2), and
    p = x with zero Neumann concentration (case 3).
    """

    def __init__(self, pressure_bc, concentration_bc):
        if pressure_bc not in _PRESSURE_BCS:
            raise ValueError("unknown pressure bc %r" % pressure_bc)
        if concentration_bc not in _CONCENTRATION_BCS:
            raise ValueError("unknown concentration bc %r" % concentration_bc)
        if (pressure_bc, concentration_bc) not in _CASES.values():
            raise ValueError(
                "unsupported bc combination (%s, %s)" % (pressure_bc, concentration_bc))
        self.pressure_bc = pressure_bc
        self.concentration_bc = concentration_bc

    @classmethod
    def case(cls, number):
        """Return the boundary case by its 1-based experiment number."""
        try:
            pbc, cbc = _CASES[int(number)]
        except (KeyError, ValueError):
            raise ValueError("boundary case must be 1, 2 or 3, got %r" % number)
        return cls(pbc, cbc)

    @property
    def number(self):
        pair = (self.pressure_bc, self.concentration_bc)
        return next(k for k, v in _CASES.items() if v == pair)

    def pressure_values(self, coords):
        """Dirichlet pressure values at an (n, 2) array of boundary points."""
        coords = np.asarray(coords, dtype=float)
        if self.pressure_bc == "dirichlet_zero":
            return np.zeros(coords.shape[0])
        return coords[:, 0].copy()

    def __eq__(self, other):
        return (isinstance(other, BoundaryCase)
                and self.pressure_bc == other.pressure_bc
                and self.concentration_bc == other.concentration_bc)


def _two_valued(inside, low, high):
    if low <= 0.0 or high <= 0.0:
        raise ValueError("field values must be strictly positive")
    values = np.where(inside, float(high), float(low))
    labels = np.where(inside, 2, 1)
    n = 2 if inside.any() else 1
    return CellField(values), ContinuumMap(labels, n)


def layered_field(n_f, low, high, stripes):
    """Two-valued horizontal-stripe field.

    Cells whose center lies in one of the half-open y-intervals
    ``[y0, y1)`` get the high value and continuum 2, all others the low
    value and continuum 1.

    Parameters
    ----------
    n_f : int
        Fine cells per side.
    low, high : float
        Field values outside and inside the stripes.
    stripes : sequence of (float, float)
        Disjoint y-intervals inside [0, 1].

    Returns
    -------
    (CellField, ContinuumMap)
    """
    iv = sorted((float(a), float(b)) for a, b in stripes)
    for a, b in iv:
        if not (0.0 <= a < b <= 1.0):
            raise ValueError("stripe (%g, %g) is not a proper interval in [0, 1]" % (a, b))
    for (a0, b0), (a1, b1) in zip(iv, iv[1:]):
        if a1 < b0:
            raise ValueError("stripes (%g, %g) and (%g, %g) overlap" % (a0, b0, a1, b1))
    yc = (np.arange(n_f * n_f) // n_f + 0.5) / n_f
    inside = np.zeros(n_f * n_f, dtype=bool)
    for a, b in iv:
        inside |= (yc >= a) & (yc < b)
    return _two_valued(inside, low, high)


def circular_field(n_f, low, high, circles):
    """Two-valued field of disk inclusions.

    Cells whose center lies strictly inside any disk get the high value
    and continuum 2.

    Parameters
    ----------
    circles : sequence of ((float, float), float)
        Disk centers and radii.
    """
    c = np.arange(n_f * n_f)
    xc = (c % n_f + 0.5) / n_f
    yc = (c // n_f + 0.5) / n_f
    inside = np.zeros(n_f * n_f, dtype=bool)
    for (cx, cy), r in circles:
        if r <= 0.0:
            raise ValueError("disk radius must be positive, got %g" % r)
        inside |= (xc - cx) ** 2 + (yc - cy) ** 2 < r * r
    return _two_valued(inside, low, high)


def constant_field(n_f, value):
    """Single-continuum constant field."""
    n_cells = n_f * n_f
    return (CellField(np.full(n_cells, float(value))),
            ContinuumMap(np.ones(n_cells, dtype=np.int64), 1))


def gaussian_source(spec, grid):
    """Sample a source at the fine cell centers.

    Parameters
    ----------
    spec : SourceSpec
    grid : FineGrid

    Returns
    -------
    ndarray
        One value per fine cell.
    """
    return spec.evaluate(grid.cell_centers())


def validate_continua(cmap, coarse):
    """Check that every continuum appears in every coarse block.

    Raises
    ------
    ValueError
        Naming the first offending (block, continuum) pairs.  The cell
        problems constrain the average of each continuum in each member
        RVE, so an absent continuum would leave a constraint undefined.
    """
    block = coarse.block_of_cell()
    n = cmap.n_continua
    counts = np.zeros((coarse.n_blocks, n), dtype=np.int64)
    np.add.at(counts, (block, cmap.labels - 1), 1)
    missing = np.argwhere(counts == 0)
    if missing.size:
        head = ", ".join("(block %d, continuum %d)" % (b, j + 1)
                         for b, j in missing[:8])
        more = "" if len(missing) <= 8 else " and %d more" % (len(missing) - 8)
        raise ValueError("continuum missing from coarse block: %s%s" % (head, more))
