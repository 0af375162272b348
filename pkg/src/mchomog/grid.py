"""Structured grids on the unit square and oversampled-region indexing.

The fine grid is a uniform mesh of square Q1 cells, the coarse grid a
uniform partition into square blocks, each block doubling as the RVE of
the homogenization procedure.  Oversampled regions are rectangles of
blocks clipped at the domain boundary.  All numbering is row-major so
that assembly order, and therefore floating point results, are
reproducible run to run.
"""

import math

import numpy as np

__all__ = [
    "FineGrid",
    "CoarseGrid",
    "OversampleRegion",
    "build_grids",
    "oversample_region",
    "layers_for",
]


class FineGrid:
    """Uniform quadrilateral mesh of the unit square.

    Parameters
    ----------
    cells_per_side : int
        Number of cells along each axis (n_f >= 1).

    Attributes
    ----------
    n : int
        Cells per side.
    h : float
        Cell width, 1/n.
    n_cells, n_nodes : int
        Total cell and node counts, n**2 and (n+1)**2.

    Notes
    -----
    Cell ``c`` has grid coordinates ``(c % n, c // n)``; node ``a`` has
    ``(a % (n+1), a // (n+1))``.  The four nodes of a cell are listed
    counterclockwise starting from the lower-left corner.
    """

    def __init__(self, cells_per_side):
        n = int(cells_per_side)
        if n < 1:
            raise ValueError("cells_per_side must be >= 1, got %r" % cells_per_side)
        self.n = n
        self.h = 1.0 / n
        self.n_cells = n * n
        self.n_nodes = (n + 1) * (n + 1)

    def cell_nodes(self):
        """Return the (n_cells, 4) array of node ids, counterclockwise."""
        return cell_node_table(self.n, self.n)

    def cell_centers(self):
        """Return the (n_cells, 2) array of cell center coordinates."""
        return cell_center_table(self.n, self.n, self.h)

    def node_coords(self):
        """Return the (n_nodes, 2) array of node coordinates."""
        return node_coord_table(self.n, self.n, self.h)

    def boundary_nodes(self):
        """Return the sorted ids of nodes on the boundary of the square."""
        return boundary_node_table(self.n, self.n)


def cell_node_table(nx, ny):
    """Node ids of each cell of an nx-by-ny rectangular grid, ccw order."""
    cx, cy = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (cy * (nx + 1) + cx).ravel()
    return np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])


def cell_center_table(nx, ny, h, origin=(0.0, 0.0)):
    cx, cy = np.meshgrid(np.arange(nx), np.arange(ny))
    x = origin[0] + (cx.ravel() + 0.5) * h
    y = origin[1] + (cy.ravel() + 0.5) * h
    return np.column_stack([x, y])


def node_coord_table(nx, ny, h, origin=(0.0, 0.0)):
    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    return np.column_stack([origin[0] + ix.ravel() * h, origin[1] + iy.ravel() * h])


def boundary_node_table(nx, ny):
    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    on = (ix == 0) | (ix == nx) | (iy == 0) | (iy == ny)
    return np.flatnonzero(on.ravel())


class CoarseGrid:
    """Partition of the unit square into M-by-M square blocks.

    Each block is one coarse Q1 element and one RVE.  Requires the fine
    resolution to be divisible by M so blocks align with fine cells.

    Attributes
    ----------
    m : int
        Blocks per side.
    H : float
        Block width, 1/m.
    cpb : int
        Fine cells per block side.
    n_blocks, n_nodes : int
        Block count m**2 and coarse node count (m+1)**2.
    """

    def __init__(self, blocks_per_side, fine):
        m = int(blocks_per_side)
        if m < 2:
            raise ValueError("blocks_per_side must be >= 2, got %r" % blocks_per_side)
        if fine.n < 2 * m:
            raise ValueError(
                "fine grid too coarse: n_f=%d < 2*M=%d" % (fine.n, 2 * m))
        if fine.n % m != 0:
            raise ValueError(
                "fine cells per side n_f=%d is not divisible by M=%d" % (fine.n, m))
        self.m = m
        self.H = 1.0 / m
        self.fine = fine
        self.cpb = fine.n // m
        self.n_blocks = m * m
        self.n_nodes = (m + 1) * (m + 1)

    def block_of_cell(self):
        """Return the (n_cells,) array mapping each fine cell to its block."""
        n = self.fine.n
        c = np.arange(self.fine.n_cells)
        bx = (c % n) // self.cpb
        by = (c // n) // self.cpb
        return by * self.m + bx

    def block_cells(self, block):
        """Return the fine cell ids inside one block, row-major."""
        bx, by = self.block_xy(block)
        n = self.fine.n
        cx = np.arange(bx * self.cpb, (bx + 1) * self.cpb)
        cy = np.arange(by * self.cpb, (by + 1) * self.cpb)
        gx, gy = np.meshgrid(cx, cy)
        return (gy * n + gx).ravel()

    def block_xy(self, block):
        if not 0 <= block < self.n_blocks:
            raise ValueError("invalid block id %r" % block)
        return block % self.m, block // self.m

    def block_center(self, block):
        bx, by = self.block_xy(block)
        return ((bx + 0.5) * self.H, (by + 0.5) * self.H)

    def block_origin(self, block):
        bx, by = self.block_xy(block)
        return (bx * self.H, by * self.H)

    def block_nodes(self):
        """Coarse node ids of each block, counterclockwise (Q1 element table)."""
        return cell_node_table(self.m, self.m)

    def node_coords(self):
        return node_coord_table(self.m, self.m, self.H)

    def boundary_nodes(self):
        return boundary_node_table(self.m, self.m)


def _mirror_indices(idx, n):
    """Fold extended cell indices into [0, n) by even reflection."""
    idx = np.where(idx < 0, -1 - idx, idx)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


class OversampleRegion:
    """A rectangle of coarse blocks around a center block.

    The member blocks are every block within Chebyshev distance
    ``layers`` of the center block.  Where the rectangle runs past the
    domain, the medium is extended by even reflection across the wall,
    so the region always has full size and every part of its boundary
    is an artificial cut.  Coordinates live in the extended frame (they
    agree with global coordinates on the physical part and continue
    linearly through the mirror), which keeps affine moment targets
    consistent across all member blocks.

    Attributes
    ----------
    center_block : int
    layers : int
    member_blocks : ndarray of int
        Physical source block of each member, row-major over the
        extended rectangle.  Mirrored members repeat wall blocks.
    central_index : int
        Position of the center block in ``member_blocks``.
    nx, ny : int
        Region size in fine cells.
    h : float
        Fine cell width.
    origin : tuple of float
        Extended-frame coordinates of the region's lower-left corner.
    cell_gmap : ndarray of int
        Region cell index to global fine cell index (through the
        reflection where applicable; mirrored cells repeat sources).
    """

    def __init__(self, coarse, block, layers):
        l = int(layers)
        if l < 0:
            raise ValueError("layers must be >= 0, got %r" % layers)
        m = coarse.m
        if l > m:
            raise ValueError(
                "layers %d exceeds blocks per side %d; a single reflection "
                "cannot pad the region" % (l, m))
        bx, by = coarse.block_xy(block)
        self.coarse = coarse
        self.center_block = int(block)
        self.layers = l
        self.bx0, self.bx1 = bx - l, bx + l
        self.by0, self.by1 = by - l, by + l
        nbx = 2 * l + 1
        mbx = _mirror_indices(np.arange(self.bx0, self.bx1 + 1), m)
        mby = _mirror_indices(np.arange(self.by0, self.by1 + 1), m)
        self.member_blocks = (mby[:, None] * m + mbx[None, :]).ravel()
        self.central_index = l * nbx + l

        cpb = coarse.cpb
        nf = coarse.fine.n
        self.cpb = cpb
        self.h = coarse.fine.h
        self.nx = nbx * cpb
        self.ny = nbx * cpb
        self.n_cells = self.nx * self.ny
        self.n_nodes = (self.nx + 1) * (self.ny + 1)
        self.origin = (self.bx0 * coarse.H, self.by0 * coarse.H)

        pcx = _mirror_indices(np.arange(self.bx0 * cpb, (self.bx1 + 1) * cpb), nf)
        pcy = _mirror_indices(np.arange(self.by0 * cpb, (self.by1 + 1) * cpb), nf)
        self.cell_gmap = (pcy[:, None] * nf + pcx[None, :]).ravel()

    def member_cell_lists(self):
        """Region cell ids of each member block, in member_blocks order."""
        cpb = self.cpb
        out = []
        nbx = self.bx1 - self.bx0 + 1
        for k, b in enumerate(self.member_blocks):
            kx, ky = k % nbx, k // nbx
            cx = np.arange(kx * cpb, (kx + 1) * cpb)
            cy = np.arange(ky * cpb, (ky + 1) * cpb)
            gx, gy = np.meshgrid(cx, cy)
            out.append((gy * self.nx + gx).ravel())
        return out

    def central_cells(self):
        """Region cell ids of the central RVE."""
        return self.member_cell_lists()[self.central_index]

    def central_nodes(self):
        """Region node ids of the central RVE patch, row-major."""
        nbx = self.bx1 - self.bx0 + 1
        k = self.central_index
        kx, ky = k % nbx, k // nbx
        cpb = self.cpb
        nx1 = self.nx + 1
        rnx, rny = np.meshgrid(np.arange(kx * cpb, (kx + 1) * cpb + 1),
                               np.arange(ky * cpb, (ky + 1) * cpb + 1))
        return (rny * nx1 + rnx).ravel()

    def cell_centers(self):
        return cell_center_table(self.nx, self.ny, self.h, self.origin)

    def node_coords(self):
        return node_coord_table(self.nx, self.ny, self.h, self.origin)


def build_grids(M, n_f):
    """Build matching coarse and fine grids of the unit square.

    Parameters
    ----------
    M : int
        Coarse blocks per side, M >= 2.
    n_f : int
        Fine cells per side; must be a multiple of M with n_f >= 2M.

    Returns
    -------
    (CoarseGrid, FineGrid)
    """
    fine = FineGrid(n_f)
    coarse = CoarseGrid(M, fine)
    return coarse, fine


def oversample_region(coarse, block, l):
    """Build the oversampled region of ``l`` layers around ``block``."""
    return OversampleRegion(coarse, block, l)


def layers_for(H):
    """Oversampling layer count ceil(-2*ln(H)) for coarse mesh size H."""
    if not 0.0 < H < 1.0:
        raise ValueError("H must be in (0, 1), got %r" % H)
    return int(math.ceil(-2.0 * math.log(H)))
