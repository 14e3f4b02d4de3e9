"""Clustered-data containers and marginal covariance assembly.

The model is y_i = X_i beta + Z_i b_i + eps_i per cluster i, with
b_i ~ N(0, G) and eps_i ~ N(0, sigma_eps^2 I).  Everything downstream
(REML, GLS, selection rules, conditional samplers) works through the
cluster-block structure of the marginal covariance
Sigma = sigma_eps^2 I + Z G Z^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterDomainError, SingularityError, ValidationError

__all__ = [
    "ClusteredDataset",
    "VarianceParams",
    "MarginalCovariance",
    "assemble_sigma",
    "random_intercept_dataset",
]


@dataclass(frozen=True)
class ClusteredDataset:
    """Response, designs and cluster layout for one model fit.

    Attributes:
        cluster_sizes: per-cluster observation counts n_i (N entries).
        y: (n,) stacked response, n = sum(n_i).
        X: (n, p) fixed-effect design, rows aligned with y.
        Z_blocks: per-cluster (n_i, q) random-effect designs.
        column_names: p labels for the columns of X.
    """

    cluster_sizes: tuple[int, ...]
    y: np.ndarray
    X: np.ndarray
    Z_blocks: tuple[np.ndarray, ...]
    column_names: tuple[str, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.cluster_sizes)
        object.__setattr__(self, "cluster_sizes", sizes)
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValidationError("X must be a 2-d array")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z_blocks", tuple(np.asarray(z, dtype=float) for z in self.Z_blocks))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if any(s <= 0 for s in sizes):
            raise ValidationError("cluster sizes must be positive")
        if len(sizes) < 2:
            raise ValidationError("need at least 2 clusters")
        n = sum(sizes)
        if y.shape != (n,):
            raise ValidationError(f"y has length {y.shape}, expected ({n},)")
        if X.shape[0] != n:
            raise ValidationError(f"X has {X.shape[0]} rows, expected {n}")
        if X.shape[1] < 1:
            raise ValidationError("X needs at least one column")
        if len(self.Z_blocks) != len(sizes):
            raise ValidationError("one Z block per cluster required")
        q = self.Z_blocks[0].shape[1]
        if q < 1:
            raise ValidationError("q must be >= 1")
        for s, z in zip(sizes, self.Z_blocks):
            if z.shape != (s, q):
                raise ValidationError(f"Z block shape {z.shape} does not match ({s}, {q})")
        if len(self.column_names) != X.shape[1]:
            raise ValidationError("column_names must match the number of X columns")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValidationError("y and X must be finite")
        if not all(np.all(np.isfinite(z)) for z in self.Z_blocks):
            raise ValidationError("Z blocks must be finite")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z_blocks[0].shape[1]

    @property
    def offsets(self) -> np.ndarray:
        """Row offsets of each cluster block (length N+1)."""
        return np.concatenate([[0], np.cumsum(self.cluster_sizes)])

    def cluster_slices(self) -> list[slice]:
        off = self.offsets
        return [slice(off[i], off[i + 1]) for i in range(self.n_clusters)]

    def is_random_intercept(self) -> bool:
        return self.q == 1 and all(np.allclose(z, 1.0) for z in self.Z_blocks)

    def restrict_clusters(self, keep: np.ndarray) -> "ClusteredDataset":
        """Subset to the given cluster indices (order preserved as given)."""
        keep = np.asarray(keep, dtype=int)
        sl = self.cluster_slices()
        rows = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in keep])
        return ClusteredDataset(
            cluster_sizes=tuple(self.cluster_sizes[i] for i in keep),
            y=self.y[rows],
            X=self.X[rows],
            Z_blocks=tuple(self.Z_blocks[i] for i in keep),
            column_names=self.column_names,
        )

    def with_response(self, y: np.ndarray) -> "ClusteredDataset":
        """Same design, different response (used by conditional samplers)."""
        return ClusteredDataset(
            cluster_sizes=self.cluster_sizes,
            y=np.asarray(y, dtype=float),
            X=self.X,
            Z_blocks=self.Z_blocks,
            column_names=self.column_names,
        )


def random_intercept_dataset(
    y: np.ndarray,
    X: np.ndarray,
    cluster_sizes,
    column_names=None,
) -> ClusteredDataset:
    """Build a dataset with Z_i = 1_{n_i} (random intercept only)."""
    sizes = tuple(int(s) for s in cluster_sizes)
    if column_names is None:
        column_names = tuple(f"x{j + 1}" for j in range(np.asarray(X).shape[1]))
    return ClusteredDataset(
        cluster_sizes=sizes,
        y=y,
        X=X,
        Z_blocks=tuple(np.ones((s, 1)) for s in sizes),
        column_names=tuple(column_names),
    )


@dataclass(frozen=True)
class VarianceParams:
    """Variance parameters theta = (vech(G), sigma_eps^2).

    G is the q x q random-effect covariance stored as its lower triangle
    stacked column-major; the last entry is the residual variance.  For the
    random-intercept case theta = (sigma_b^2, sigma_eps^2).
    """

    theta: np.ndarray
    q: int = 1

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        h = self.q * (self.q + 1) // 2 + 1
        if theta.shape != (h,):
            raise ParameterDomainError(
                f"theta must have length q(q+1)/2 + 1 = {h}, got {theta.shape}"
            )
        if not np.all(np.isfinite(theta)):
            raise ParameterDomainError("theta must be finite")
        if self.residual_variance <= 0:
            raise ParameterDomainError("residual variance must be positive")
        w = np.linalg.eigvalsh(self.G)
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise ParameterDomainError("G must be positive semidefinite")

    @classmethod
    def random_intercept(cls, sigma_b2: float, sigma_eps2: float) -> "VarianceParams":
        return cls(theta=np.array([float(sigma_b2), float(sigma_eps2)]), q=1)

    @property
    def G(self) -> np.ndarray:
        """Random-effect covariance matrix (q x q, symmetric)."""
        G = np.zeros((self.q, self.q))
        idx = 0
        for j in range(self.q):
            for i in range(j, self.q):
                G[i, j] = self.theta[idx]
                G[j, i] = self.theta[idx]
                idx += 1
        return G

    @property
    def residual_variance(self) -> float:
        return float(self.theta[-1])

    @property
    def h(self) -> int:
        return self.theta.shape[0]


@dataclass
class MarginalCovariance:
    """Cluster-block-diagonal Sigma with cached Cholesky factors.

    The dense n x n matrix is only materialized on demand; all solves and
    whitening operate block-wise.
    """

    blocks: list[np.ndarray]
    cholesky_blocks: list[np.ndarray]
    cluster_sizes: tuple[int, ...]
    is_block_diagonal: bool = True
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return sum(self.cluster_sizes)

    @property
    def sigma(self) -> np.ndarray:
        """Dense Sigma (assembled lazily, cached)."""
        if self._dense is None:
            n = self.n
            out = np.zeros((n, n))
            off = 0
            for b in self.blocks:
                k = b.shape[0]
                out[off : off + k, off : off + k] = b
                off += k
            self._dense = out
        return self._dense

    @property
    def cholesky_factor(self) -> np.ndarray:
        """Dense lower-triangular factor of Sigma."""
        n = self.n
        out = np.zeros((n, n))
        off = 0
        for c in self.cholesky_blocks:
            k = c.shape[0]
            out[off : off + k, off : off + k] = c
            off += k
        return out

    def _block_views(self, v: np.ndarray):
        off = 0
        for i, s in enumerate(self.cluster_sizes):
            yield i, v[off : off + s]
            off += s

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """Return L^{-1} v where Sigma = L L^T (works for vectors or matrices)."""
        import scipy.linalg

        out = np.empty_like(np.asarray(v, dtype=float))
        for i, chunk in self._block_views(np.asarray(v, dtype=float)):
            out_chunk = scipy.linalg.solve_triangular(
                self.cholesky_blocks[i], chunk, lower=True, check_finite=False
            )
            off = sum(self.cluster_sizes[:i])
            out[off : off + self.cluster_sizes[i]] = out_chunk
        return out

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Return Sigma^{-1} v via the cached block factorization."""
        import scipy.linalg

        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        off = 0
        for i, s in enumerate(self.cluster_sizes):
            out[off : off + s] = scipy.linalg.cho_solve(
                (self.cholesky_blocks[i], True), v[off : off + s], check_finite=False
            )
            off += s
        return out

    def logdet(self) -> float:
        """log |Sigma| from the block Cholesky diagonals."""
        total = 0.0
        for c in self.cholesky_blocks:
            total += 2.0 * float(np.sum(np.log(np.diag(c))))
        return total

    def trace_inverse(self) -> float:
        import scipy.linalg

        total = 0.0
        for c in self.cholesky_blocks:
            inv = scipy.linalg.cho_solve((c, True), np.eye(c.shape[0]), check_finite=False)
            total += float(np.trace(inv))
        return total

    def whitener(self) -> "BatchedWhitener":
        """Precompute inverse factors for fast repeated whitening."""
        return BatchedWhitener(self)


class BatchedWhitener:
    """Applies L^{-1} to many vectors cheaply.

    Inverse Cholesky blocks are grouped by cluster size so balanced designs
    whiten with a single batched matmul instead of one solve per cluster.
    """

    def __init__(self, sigma: MarginalCovariance):
        import scipy.linalg

        sizes = sigma.cluster_sizes
        self.n = sum(sizes)
        inv_blocks = [
            scipy.linalg.solve_triangular(
                c, np.eye(c.shape[0]), lower=True, check_finite=False
            )
            for c in sigma.cholesky_blocks
        ]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(sizes):
            groups.setdefault(s, []).append(i)
        self._groups = []
        for s, idxs in groups.items():
            rows = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in idxs])
            stack = np.stack([inv_blocks[i] for i in idxs])
            self._groups.append((rows, stack))

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Return L^{-1} v for a vector of length n."""
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for rows, stack in self._groups:
            k = stack.shape[1]
            chunk = v[rows].reshape(-1, k)
            out[rows] = np.einsum("gij,gj->gi", stack, chunk).ravel()
        return out


def assemble_sigma(dataset: ClusteredDataset, params: VarianceParams) -> MarginalCovariance:
    """Assemble Sigma = sigma_eps^2 I + Z G Z^T block by block.

    Raises:
        ParameterDomainError: if G is not PSD or the residual variance is
            not positive (validated by VarianceParams itself).
        SingularityError: if any cluster block fails to factor.
    """
    if params.q != dataset.q:
        raise ParameterDomainError(
            f"params have q={params.q} but dataset has q={dataset.q}"
        )
    G = params.G
    s2 = params.residual_variance
    blocks = []
    chols = []
    for z, size in zip(dataset.Z_blocks, dataset.cluster_sizes):
        block = z @ G @ z.T
        block[np.diag_indices(size)] += s2
        try:
            chol = np.linalg.cholesky(block)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"cluster block of size {size} is not positive definite") from exc
        blocks.append(block)
        chols.append(chol)
    return MarginalCovariance(
        blocks=blocks,
        cholesky_blocks=chols,
        cluster_sizes=dataset.cluster_sizes,
        is_block_diagonal=True,
    )
