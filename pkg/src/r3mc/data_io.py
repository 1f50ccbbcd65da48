"""Synthetic problem generators, ratings ingestion, and Matrix Market I/O.

Generators are seed-deterministic through the package RNG.  Matrix
Market support covers the coordinate format for observed entries and
the dense array format for factor matrices; values are written with
shortest exact float representations so read(write(x)) is lossless.
"""

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .problem import CompletionProblem, ObservedEntries
from .rng import CounterRng
from .smallmat import polar_orthonormal_factor


def degrees_of_freedom(n, m, rank):
    """Parameter count of a rank-r matrix: r (n + m - r)."""
    return rank * (n + m - rank)


def os_ratio(n, m, rank, count):
    """Observed entries per degree of freedom."""
    return count / degrees_of_freedom(n, m, rank)


def required_count(n, m, rank, oversampling):
    """Entry count hitting a target oversampling ratio."""
    return int(round(oversampling * degrees_of_freedom(n, m, rank)))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic completion problem."""

    n: int
    m: int
    rank: int
    oversampling: float
    condition_number: float | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigError("dimensions must be positive")
        if not 1 <= self.rank <= min(self.n, self.m):
            raise ConfigError("rank must lie in [1, min(n, m)]")
        if self.oversampling <= 0:
            raise ConfigError("oversampling must be positive")
        if self.count > self.n * self.m:
            raise ConfigError(
                "oversampling %.3g needs %d entries, grid has only %d"
                % (self.oversampling, self.count, self.n * self.m)
            )
        if self.condition_number is not None and self.condition_number < 1.0:
            raise ConfigError("condition number must be at least 1")

    @property
    def count(self):
        return required_count(self.n, self.m, self.rank, self.oversampling)


def synth_gaussian(n, m, rank, seed):
    """Ground-truth factors (left, right) with iid gaussian entries."""
    rng = CounterRng(seed)
    left = rng.standard_normal((n, rank))
    right = rng.standard_normal((rank, m))
    return left, right


def synth_conditioned(n, m, rank, condition_number, seed):
    """Ground-truth factors with prescribed singular values.

    Singular values are geometrically spaced from 1/CN up to 1, so the
    product has condition number exactly CN (all ones when CN = 1).
    """
    if condition_number < 1.0:
        raise ConfigError("condition number must be at least 1")
    if rank == 1 and condition_number > 1.0:
        raise ConfigError("a rank-one matrix cannot have condition number above 1")
    rng = CounterRng(seed)
    qa = polar_orthonormal_factor(rng.standard_normal((n, rank)))
    qb = polar_orthonormal_factor(rng.standard_normal((m, rank)))
    if rank == 1:
        sigma = np.ones(1)
    else:
        sigma = np.logspace(-np.log10(condition_number), 0.0, rank)
    return qa * sigma, qb.T


def sample_mask(n, m, count, seed):
    """Exact-count uniform mask without replacement, row-major sorted."""
    if not 1 <= count <= n * m:
        raise ConfigError("count must lie in [1, n m]")
    rng = CounterRng(seed)
    lin = rng.sample_without_replacement(n * m, count)
    return lin // m, lin % m


def synthesize(spec, seed):
    """Build (CompletionProblem, (left, right)) from a SyntheticSpec.

    The mask seed and factor seed are decoupled offsets of ``seed`` so
    regenerating with the same seed reproduces both exactly.
    """
    if spec.condition_number is None:
        left, right = synth_gaussian(spec.n, spec.m, spec.rank, seed)
    else:
        left, right = synth_conditioned(
            spec.n, spec.m, spec.rank, spec.condition_number, seed
        )
    rows, cols = sample_mask(spec.n, spec.m, spec.count, seed + 1)
    vals = np.einsum("ij,ji->i", left[rows], right[:, cols])
    entries = ObservedEntries(spec.n, spec.m, rows, cols, vals)
    return CompletionProblem(entries, spec.rank), (left, right)


@dataclass(frozen=True)
class RatingsDataset:
    """Ratings on a densely re-indexed users x items grid.

    Row and column ids are contiguous from zero in raw-id order; the
    original 1-based id ranges are kept for reporting since published
    dataset sizes usually quote them.
    """

    n_users: int
    n_items: int
    rows: np.ndarray
    cols: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_id_range: int
    item_id_range: int

    @property
    def count(self):
        return int(self.ratings.size)


def parse_movielens(source):
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines into a RatingsDataset.

    Ids are 1-based and possibly sparse in the file; users and items are
    re-indexed densely from zero.  Accepts a path or an iterable of
    lines.
    """
    close = False
    if isinstance(source, (str, Path)):
        source = open(source, "r", encoding="utf-8")
        close = True
    users, items, ratings, stamps = [], [], [], []
    try:
        for lineno, line in enumerate(source, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError("expected 4 fields separated by '::'", lineno)
            try:
                uid, mid = int(parts[0]), int(parts[1])
                rating = float(parts[2])
                stamp = int(parts[3])
            except ValueError as exc:
                raise ParseError("non-numeric field: %s" % exc, lineno) from None
            if uid < 1 or mid < 1:
                raise ParseError("ids must be positive", lineno)
            if not 0.0 < rating <= 5.0:
                raise ParseError("rating %r outside (0, 5]" % parts[2], lineno)
            users.append(uid)
            items.append(mid)
            ratings.append(rating)
            stamps.append(stamp)
    finally:
        if close:
            source.close()
    if not users:
        raise ParseError("no ratings found")
    raw_users = np.asarray(users, dtype=np.int64)
    raw_items = np.asarray(items, dtype=np.int64)
    uniq_users, rows = np.unique(raw_users, return_inverse=True)
    uniq_items, cols = np.unique(raw_items, return_inverse=True)
    return RatingsDataset(
        n_users=int(uniq_users.size),
        n_items=int(uniq_items.size),
        rows=rows.astype(np.int64),
        cols=cols.astype(np.int64),
        ratings=np.asarray(ratings),
        timestamps=np.asarray(stamps, dtype=np.int64),
        user_id_range=int(uniq_users[-1]),
        item_id_range=int(uniq_items[-1]),
    )


def to_entries(dataset):
    """Observed entries on the ratings grid (rejects duplicate ratings)."""
    return ObservedEntries(
        dataset.n_users, dataset.n_items, dataset.rows, dataset.cols, dataset.ratings
    )


def _subset(entries, idx):
    return ObservedEntries(
        entries.n, entries.m, entries.rows[idx], entries.cols[idx], entries.vals[idx]
    )


def split_train_val_test(entries, fractions, seed):
    """Random disjoint split covering all entries.

    ``fractions`` are three nonnegative numbers summing to one; the
    split sizes match them to within a single entry.
    """
    f = tuple(float(v) for v in fractions)
    if len(f) != 3 or any(v < 0 for v in f):
        raise ConfigError("fractions must be three nonnegative numbers")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ConfigError("fractions must sum to one")
    total = entries.count
    perm = CounterRng(seed).permutation(total)
    c1 = int(round(f[0] * total))
    c2 = int(round((f[0] + f[1]) * total))
    c1, c2 = min(c1, total), min(max(c2, c1), total)
    return (
        _subset(entries, perm[:c1]),
        _subset(entries, perm[c1:c2]),
        _subset(entries, perm[c2:]),
    )


_COORD_BANNER = "%%matrixmarket matrix coordinate real general"
_ARRAY_BANNER = "%%matrixmarket matrix array real general"


def _reader(source):
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8"), True
    return source, False


def _writer(target):
    if isinstance(target, (str, Path)):
        return open(target, "w", encoding="utf-8"), True
    return target, False


def write_matrix_market(target, entries, comments=()):
    """Write observed entries in the 1-based coordinate format."""
    stream, close = _writer(target)
    try:
        stream.write("%%MatrixMarket matrix coordinate real general\n")
        for c in comments:
            stream.write("% " + str(c) + "\n")
        stream.write("%d %d %d\n" % (entries.n, entries.m, entries.count))
        for i, j, v in zip(entries.rows, entries.cols, entries.vals):
            stream.write("%d %d %s\n" % (i + 1, j + 1, repr(float(v))))
    finally:
        if close:
            stream.close()


def read_matrix_market(source):
    """Read a coordinate real general file into ObservedEntries.

    Raises ParseError with line numbers for malformed lines, indices out
    of range, duplicate entries (both occurrences reported), and entry
    count mismatches.
    """
    stream, close = _reader(source)
    try:
        lines = enumerate(stream, start=1)
        try:
            lineno, banner = next(lines)
        except StopIteration:
            raise ParseError("empty file") from None
        if " ".join(banner.lower().split()) != _COORD_BANNER:
            raise ParseError("expected coordinate real general banner", 1)
        shape = None
        for lineno, line in lines:
            body = line.strip()
            if not body or body.startswith("%"):
                continue
            parts = body.split()
            if len(parts) != 3:
                raise ParseError("expected 'rows cols nnz'", lineno)
            try:
                shape = tuple(int(p) for p in parts)
            except ValueError:
                raise ParseError("non-integer size field", lineno) from None
            break
        if shape is None:
            raise ParseError("missing size line")
        n, m, nnz = shape
        if n < 1 or m < 1 or nnz < 0:
            raise ParseError("invalid sizes %r" % (shape,), lineno)
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        seen = {}
        k = 0
        for lineno, line in lines:
            body = line.strip()
            if not body or body.startswith("%"):
                continue
            if k >= nnz:
                raise ParseError("more than %d entries" % nnz, lineno)
            parts = body.split()
            if len(parts) != 3:
                raise ParseError("expected 'row col value'", lineno)
            try:
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError("malformed entry", lineno) from None
            if not 1 <= i <= n:
                raise ParseError("row index %d outside [1, %d]" % (i, n), lineno)
            if not 1 <= j <= m:
                raise ParseError("column index %d outside [1, %d]" % (j, m), lineno)
            if not np.isfinite(v):
                raise ParseError("non-finite value", lineno)
            prev = seen.setdefault((i, j), lineno)
            if prev != lineno:
                raise ParseError(
                    "duplicate entry (%d, %d), first seen at line %d" % (i, j, prev),
                    lineno,
                )
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise ParseError("expected %d entries, found %d" % (nnz, k))
        return ObservedEntries(n, m, rows, cols, vals)
    finally:
        if close:
            stream.close()


def write_dense_matrix_market(target, matrix, comments=()):
    """Write a dense matrix in the column-major array format."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ConfigError("expected a matrix")
    stream, close = _writer(target)
    try:
        stream.write("%%MatrixMarket matrix array real general\n")
        for c in comments:
            stream.write("% " + str(c) + "\n")
        stream.write("%d %d\n" % matrix.shape)
        for v in matrix.T.ravel():
            stream.write(repr(float(v)) + "\n")
    finally:
        if close:
            stream.close()


def read_dense_matrix_market(source):
    """Read an array real general file into an ndarray."""
    stream, close = _reader(source)
    try:
        lines = enumerate(stream, start=1)
        try:
            lineno, banner = next(lines)
        except StopIteration:
            raise ParseError("empty file") from None
        if " ".join(banner.lower().split()) != _ARRAY_BANNER:
            raise ParseError("expected array real general banner", 1)
        shape = None
        for lineno, line in lines:
            body = line.strip()
            if not body or body.startswith("%"):
                continue
            parts = body.split()
            if len(parts) != 2:
                raise ParseError("expected 'rows cols'", lineno)
            try:
                shape = (int(parts[0]), int(parts[1]))
            except ValueError:
                raise ParseError("non-integer size field", lineno) from None
            break
        if shape is None:
            raise ParseError("missing size line")
        rows, cols = shape
        if rows < 1 or cols < 1:
            raise ParseError("invalid sizes %r" % (shape,), lineno)
        data = np.empty(rows * cols)
        k = 0
        for lineno, line in lines:
            body = line.strip()
            if not body or body.startswith("%"):
                continue
            if k >= data.size:
                raise ParseError("more than %d values" % data.size, lineno)
            try:
                data[k] = float(body)
            except ValueError:
                raise ParseError("malformed value", lineno) from None
            k += 1
        if k != data.size:
            raise ParseError("expected %d values, found %d" % (data.size, k))
        return data.reshape((cols, rows)).T
    finally:
        if close:
            stream.close()
