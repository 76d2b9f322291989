"""
Minimal deterministic dense linear algebra.

Matrices are stored row-major in ``array.array('d')`` buffers. Vectorization
(``vec``/``unvec``) is column-major regardless of storage order, so that

    (A ⊗ B) · vec(X) == vec(B · X · Aᵀ)

holds exactly. Reshape helpers perform the index mapping explicitly.
"""

import array
import contextlib
import logging
import math
import operator
import sys

from . import ShapeError

logger = logging.getLogger(__name__)

if sys.version_info[0:2] >= (3, 12):
    _sumprod = math.sumprod
else:

    def _sumprod(p, q):
        return sum(map(operator.mul, p, q))


#: Either "column" (the only correct setting) or "row". Row-major vec exists
#: to show that the verification suites notice a layout mistake.
_VEC_ORDER = "column"


@contextlib.contextmanager
def row_major_vec():
    """Temporarily switch vec/unvec to row-major order (negative control)."""
    global _VEC_ORDER
    previous, _VEC_ORDER = _VEC_ORDER, "row"
    try:
        yield
    finally:
        _VEC_ORDER = previous


def _zeros(n):
    return array.array("d", bytes(8 * n))


class DenseMatrix(object):
    """A rows x cols matrix of 64-bit floats.

    ``data`` always has exactly ``rows * cols`` entries in row-major order.
    Operations return new matrices; the ``i*`` methods and ``assign`` update
    in place and are reserved for the optimizer.
    """

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows, cols, data=None):
        if rows < 1 or cols < 1:
            raise ShapeError(
                "matrix dimensions must be positive, got (%s, %s)" % (rows, cols)
            )
        if data is None:
            data = _zeros(rows * cols)
        elif not (isinstance(data, array.array) and data.typecode == "d"):
            data = array.array("d", data)
        if len(data) != rows * cols:
            raise ShapeError(
                "data length %d does not match shape (%d, %d)"
                % (len(data), rows, cols)
            )
        self.rows = rows
        self.cols = cols
        self.data = data

    @classmethod
    def zeros(cls, rows, cols):
        return cls(rows, cols)

    @classmethod
    def identity(cls, n):
        m = cls(n, n)
        m.data[:: n + 1] = array.array("d", [1.0] * n)
        return m

    @classmethod
    def from_rows(cls, rows):
        rows = [list(r) for r in rows]
        if not rows or not rows[0]:
            raise ShapeError("from_rows needs at least one non-empty row")
        width = len(rows[0])
        data = array.array("d")
        for r in rows:
            if len(r) != width:
                raise ShapeError("ragged rows: %d != %d" % (len(r), width))
            data.extend(float(v) for v in r)
        return cls(len(rows), width, data)

    @classmethod
    def from_columns(cls, columns):
        return cls.from_rows(columns).transpose()

    @classmethod
    def column_vector(cls, values):
        values = array.array("d", values)
        return cls(len(values), 1, values)

    @classmethod
    def randn(cls, rows, cols, rng, std=1.0):
        """Entries drawn i.i.d. from N(0, std**2)."""
        normal = rng.normal
        return cls(rows, cols, array.array("d", [std * normal() for _ in range(rows * cols)]))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def size(self):
        return self.rows * self.cols

    def __getitem__(self, index):
        i, j = index
        return self.data[i * self.cols + j]

    def __setitem__(self, index, value):
        i, j = index
        self.data[i * self.cols + j] = value

    def __eq__(self, other):
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.shape == other.shape and self.data == other.data

    __hash__ = None

    def __repr__(self):
        return "DenseMatrix(%d, %d, %s)" % (self.rows, self.cols, self.to_rows())

    def row(self, i):
        return self.data[i * self.cols : (i + 1) * self.cols]

    def column(self, j):
        return self.data[j :: self.cols]

    def to_rows(self):
        return [list(self.row(i)) for i in range(self.rows)]

    def copy(self):
        return DenseMatrix(self.rows, self.cols, array.array("d", self.data))

    def transpose(self):
        data = array.array("d")
        for j in range(self.cols):
            data.extend(self.data[j :: self.cols])
        return DenseMatrix(self.cols, self.rows, data)

    @property
    def T(self):
        return self.transpose()

    def _check_same_shape(self, other, op):
        if self.shape != other.shape:
            raise ShapeError(
                "%s: shapes %s and %s differ" % (op, self.shape, other.shape)
            )

    def scale(self, factor):
        return DenseMatrix(
            self.rows, self.cols, array.array("d", [factor * v for v in self.data])
        )

    def add(self, other):
        self._check_same_shape(other, "add")
        return DenseMatrix(
            self.rows, self.cols, array.array("d", map(operator.add, self.data, other.data))
        )

    def sub(self, other):
        self._check_same_shape(other, "sub")
        return DenseMatrix(
            self.rows, self.cols, array.array("d", map(operator.sub, self.data, other.data))
        )

    def hadamard(self, other):
        self._check_same_shape(other, "hadamard")
        return DenseMatrix(
            self.rows, self.cols, array.array("d", map(operator.mul, self.data, other.data))
        )

    def max_abs(self):
        return max(map(abs, self.data))

    def is_finite(self):
        return all(map(math.isfinite, self.data))

    # In-place updates (optimizer only)

    def assign(self, other):
        self._check_same_shape(other, "assign")
        self.data[:] = other.data

    def iadd_scaled(self, other, factor):
        """self += factor * other"""
        self._check_same_shape(other, "iadd_scaled")
        self.data[:] = array.array(
            "d", [a + factor * b for a, b in zip(self.data, other.data)]
        )

    def imul_scalar(self, factor):
        self.data[:] = array.array("d", [factor * v for v in self.data])


def matmul(lhs, rhs):
    """Standard matrix product, result shape (lhs.rows, rhs.cols)."""
    if lhs.cols != rhs.rows:
        raise ShapeError("matmul: cannot multiply %s by %s" % (lhs.shape, rhs.shape))
    k, n = lhs.cols, rhs.cols
    columns = [rhs.data[j::n] for j in range(n)]
    out = array.array("d")
    data = lhs.data
    for i in range(lhs.rows):
        row = data[i * k : (i + 1) * k]
        out.extend([_sumprod(row, c) for c in columns])
    return DenseMatrix(lhs.rows, n, out)


def kron(a, b):
    """Kronecker product: block (i, j) of the result is a[i, j] * b."""
    out = array.array("d")
    bc = b.cols
    for i in range(a.rows):
        arow = a.row(i)
        for p in range(b.rows):
            brow = b.data[p * bc : (p + 1) * bc]
            for aij in arow:
                out.extend([aij * v for v in brow])
    return DenseMatrix(a.rows * b.rows, a.cols * b.cols, out)


def vec_reshape(v, rows_m, cols_n):
    """Unvec a column vector of length m*n into an m x n matrix.

    output[i, j] = v[i + j*m]
    """
    if v.cols != 1 or v.rows != rows_m * cols_n:
        raise ShapeError(
            "vec_reshape: cannot reshape %s into (%d, %d)" % (v.shape, rows_m, cols_n)
        )
    if _VEC_ORDER == "row":
        return DenseMatrix(rows_m, cols_n, array.array("d", v.data))
    out = array.array("d")
    for i in range(rows_m):
        out.extend(v.data[i::rows_m])
    return DenseMatrix(rows_m, cols_n, out)


def vec_flatten(x):
    """Column-major vec of x as a (rows*cols) x 1 column vector."""
    if _VEC_ORDER == "row":
        return DenseMatrix(x.size, 1, array.array("d", x.data))
    return DenseMatrix(x.size, 1, x.transpose().data)


def fold_columns(x, rows_m, cols_n):
    """Batched vec_reshape.

    Each column k of x (length m*n) is unvec'd into an m x n block, and the
    blocks are laid side by side: out[i, k*n + j] = unvec(x[:, k])[i, j].
    """
    if x.rows != rows_m * cols_n:
        raise ShapeError(
            "fold_columns: %s rows is not %d x %d" % (x.shape, rows_m, cols_n)
        )
    batch = x.cols
    columns = [x.data[k::batch] for k in range(batch)]
    out = array.array("d")
    if _VEC_ORDER == "row":
        for i in range(rows_m):
            for c in columns:
                out.extend(c[i * cols_n : (i + 1) * cols_n])
    else:
        for i in range(rows_m):
            for c in columns:
                out.extend(c[i::rows_m])
    return DenseMatrix(rows_m, batch * cols_n, out)


def unfold_columns(y, cols_n):
    """Batched vec_flatten, the exact inverse of ``fold_columns``.

    y is m x (batch*n); block k (columns k*n .. k*n+n-1) becomes column k of
    an (m*n) x batch result.
    """
    if y.cols % cols_n:
        raise ShapeError("unfold_columns: %d columns is not a multiple of %d"
                         % (y.cols, cols_n))
    batch, width, m = y.cols // cols_n, y.cols, y.rows
    vecs = array.array("d")
    if _VEC_ORDER == "row":
        for k in range(batch):
            for i in range(m):
                start = i * width + k * cols_n
                vecs.extend(y.data[start : start + cols_n])
    else:
        for k in range(batch):
            for j in range(cols_n):
                vecs.extend(y.data[k * cols_n + j :: width])
    return DenseMatrix(batch, m * cols_n, vecs).transpose()


def wide_to_tall(y, blocks):
    """r x (blocks*c) -> (blocks*r) x c, stacking the column blocks vertically."""
    if y.cols % blocks:
        raise ShapeError("wide_to_tall: %d columns is not a multiple of %d"
                         % (y.cols, blocks))
    c, width = y.cols // blocks, y.cols
    out = array.array("d")
    for k in range(blocks):
        for p in range(y.rows):
            start = p * width + k * c
            out.extend(y.data[start : start + c])
    return DenseMatrix(blocks * y.rows, c, out)


def tall_to_wide(y, blocks):
    """(blocks*r) x c -> r x (blocks*c), the inverse of ``wide_to_tall``."""
    if y.rows % blocks:
        raise ShapeError("tall_to_wide: %d rows is not a multiple of %d"
                         % (y.rows, blocks))
    r, c = y.rows // blocks, y.cols
    out = array.array("d")
    for p in range(r):
        for k in range(blocks):
            start = (k * r + p) * c
            out.extend(y.data[start : start + c])
    return DenseMatrix(r, blocks * c, out)


def numerical_rank(m, tol=1e-8):
    """Rank by Gaussian elimination with partial pivoting.

    Pivots with absolute value <= tol * max_abs_entry count as zero.
    """
    if tol <= 0:
        raise ValueError("numerical_rank: tol must be positive, got %r" % tol)
    largest = m.max_abs()
    if largest == 0.0:
        return 0
    threshold = tol * largest
    rows = [list(m.row(i)) for i in range(m.rows)]
    rank = 0
    for c in range(m.cols):
        if rank == m.rows:
            break
        pivot = max(range(rank, m.rows), key=lambda i: abs(rows[i][c]))
        if abs(rows[pivot][c]) <= threshold:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        prow = rows[rank]
        inv = 1.0 / prow[c]
        for i in range(rank + 1, m.rows):
            factor = rows[i][c] * inv
            if factor:
                row = rows[i]
                for j in range(c, m.cols):
                    row[j] -= factor * prow[j]
        rank += 1
    return rank


# Random numbers

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng(object):
    """Splittable counter-based 64-bit generator (SplitMix64 finalizer).

    Draw n is ``mix(key + n * golden)``, so a stream is fully determined by its
    seed and the sequence of calls made on it. Normals use Box-Muller and keep
    the second value of each pair for the next call.
    """

    __slots__ = ("key", "counter", "_spare")

    def __init__(self, seed):
        self.key = _mix64(int(seed) & _MASK64)
        self.counter = 0
        self._spare = None

    def next_u64(self):
        self.counter += 1
        return _mix64((self.key + self.counter * _GOLDEN) & _MASK64)

    def split(self):
        """Return an independent child stream; advances this stream by one draw."""
        child = Rng.__new__(Rng)
        child.key = _mix64(self.next_u64() ^ 0x5851F42D4C957F2D)
        child.counter = 0
        child._spare = None
        return child

    def uniform(self):
        """Uniform float in the open interval (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * (1.0 / (1 << 53))

    def normal(self):
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value
        radius = math.sqrt(-2.0 * math.log(self.uniform()))
        angle = 2.0 * math.pi * self.uniform()
        self._spare = radius * math.sin(angle)
        return radius * math.cos(angle)

    def randint(self, lo, hi):
        """Integer in the closed interval [lo, hi]."""
        if hi < lo:
            raise ValueError("randint: empty range [%d, %d]" % (lo, hi))
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items):
        """Fisher-Yates shuffle in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]
