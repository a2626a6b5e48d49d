from dataclasses import dataclass, field
import logging
import typing as t

import numpy as np
import scipy.linalg as sl

from semired.constants import (
    FULL_CG_MAX,
    FULL_CG_SCALE,
    FULL_CG_TOL,
    INNER_CG_MAX,
    INNER_CG_TOL,
    PIVOT_TOL,
)
from semired.errors import (
    IndefiniteSystemError,
    SingularSystemError,
    SolverError,
)

_log = logging.getLogger(__name__)

Vector = Matrix = np.ndarray
Product = t.Callable[[Vector], Vector]


@dataclass(frozen=True)
class BlockNormalSystem:
    """The weighted least-squares system min ||J dx + r||^2 + lam ||dx||^2.

    J = [J_y | blockdiag(J_z^(1), ..., J_z^(n))]; block i owns the next
    j_z_blocks[i].shape[0] rows of j_y and r. When `gradient` is given the
    solvers return the solution of (J^T J + lam I) dx = -gradient instead
    of using J^T r.
    """

    j_y: Matrix
    j_z_blocks: t.List[Matrix]
    r: Vector
    lam: float = 0.0
    gradient: t.Optional[Vector] = None

    def __post_init__(self):
        j_y = np.atleast_2d(np.asarray(self.j_y, dtype=float))
        blocks = [np.asarray(b, dtype=float) for b in self.j_z_blocks]
        blocks = [b.reshape(b.shape[0], -1) for b in blocks]
        r = np.asarray(self.r, dtype=float)
        if not blocks:
            raise SolverError("A block system needs at least one z-block.")
        rows = sum(b.shape[0] for b in blocks)
        if j_y.shape[0] != rows or r.shape != (rows,):
            raise SolverError(
                f"Row mismatch: j_y has {j_y.shape[0]} rows, r has"
                f" {r.size}, z-blocks have {rows}."
            )
        if self.lam < 0:
            raise SolverError(
                f"Damping must be nonnegative, got {self.lam}."
            )
        object.__setattr__(self, "j_y", j_y)
        object.__setattr__(self, "j_z_blocks", blocks)
        object.__setattr__(self, "r", r)
        if self.gradient is not None:
            gradient = np.asarray(self.gradient, dtype=float)
            if gradient.shape != (self.size,):
                raise SolverError(
                    f"Expected a gradient of length {self.size},"
                    f" got {gradient.shape}."
                )
            object.__setattr__(self, "gradient", gradient)

    @property
    def n_y(self) -> int:
        return self.j_y.shape[1]

    @property
    def n_z(self) -> int:
        return sum(b.shape[1] for b in self.j_z_blocks)

    @property
    def size(self) -> int:
        return self.n_y + self.n_z

    def row_slices(self) -> t.List[slice]:
        slices, start = [], 0
        for block in self.j_z_blocks:
            slices.append(slice(start, start + block.shape[0]))
            start += block.shape[0]
        return slices

    def dense(self) -> Matrix:
        return np.hstack([self.j_y, sl.block_diag(*self.j_z_blocks)])


@dataclass(frozen=True)
class BlockHessianOperator:
    byy: Product
    byz: Product
    bzy: Product
    bzz: Product
    n_y: int
    n_z: int
    symmetric: bool = True

    @property
    def size(self) -> int:
        return self.n_y + self.n_z

    def matvec(self, x: Vector) -> Vector:
        u, v = x[: self.n_y], x[self.n_y :]
        return np.concatenate(
            [self.byy(u) + self.byz(v), self.bzy(u) + self.bzz(v)]
        )

    __call__ = matvec

    def to_dense(self) -> Matrix:
        dense = np.zeros((self.size, self.size))
        for i, e in enumerate(np.eye(self.size)):
            dense[:, i] = self.matvec(e)
        return dense

    @classmethod
    def from_dense(cls, B: Matrix, n_y: int) -> "BlockHessianOperator":
        B = np.asarray(B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise SolverError(f"Expected a square matrix, got {B.shape}.")
        byy, byz = B[:n_y, :n_y], B[:n_y, n_y:]
        bzy, bzz = B[n_y:, :n_y], B[n_y:, n_y:]
        return cls(
            byy=lambda u: byy @ u,
            byz=lambda v: byz @ v,
            bzy=lambda u: bzy @ u,
            bzz=lambda v: bzz @ v,
            n_y=n_y,
            n_z=B.shape[0] - n_y,
            symmetric=bool(np.allclose(B, B.T)),
        )

    def restrict(
        self, free_y: Vector, free_z: Vector
    ) -> "BlockHessianOperator":
        """The operator on the free variables (B_II), by zero embedding."""
        free_y = np.asarray(free_y, dtype=int)
        free_z = np.asarray(free_z, dtype=int)

        def embed(values: Vector, index: Vector, n: int) -> Vector:
            full = np.zeros(n)
            full[index] = values
            return full

        def product(block: Product, index_in, n_in, index_out) -> Product:
            return lambda v: block(embed(v, index_in, n_in))[index_out]

        return BlockHessianOperator(
            byy=product(self.byy, free_y, self.n_y, free_y),
            byz=product(self.byz, free_z, self.n_z, free_y),
            bzy=product(self.bzy, free_y, self.n_y, free_z),
            bzz=product(self.bzz, free_z, self.n_z, free_z),
            n_y=free_y.size,
            n_z=free_z.size,
            symmetric=self.symmetric,
        )


class CGResult(t.NamedTuple):
    x: Vector
    iterations: int
    relres: float


@dataclass
class MixedSolveStats:
    cg_solves: int = 0
    cg_iterations: int = 0
    max_relres: float = 0.0
    unconverged: t.List[int] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.unconverged

    def record(self, result: CGResult, tol: float):
        if result.relres > tol:
            self.unconverged.append(self.cg_solves)
        self.cg_solves += 1
        self.cg_iterations += result.iterations
        self.max_relres = max(self.max_relres, result.relres)


def householder_qr(A: Matrix) -> t.Tuple[Matrix, Matrix]:
    """Thin Householder QR with a nonnegative diagonal in R."""
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    if n == 0 or m == 0:
        return np.zeros((m, 0)), np.zeros((0, n))
    Q, R = sl.qr(A, mode="economic")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs
    R = signs[:, None] * R
    return Q, R


def _check_triangular(R: Matrix, n: int, name: str):
    if R.shape[0] < n:
        raise SingularSystemError(
            f"{name}: {R.shape[0]} rows cannot have full column rank {n}."
        )
    if n == 0:
        return
    diag = np.abs(np.diag(R))
    if diag.min() <= PIVOT_TOL * max(diag.max(), 1.0):
        raise SingularSystemError(
            f"{name}: R has a zero pivot at column {int(diag.argmin())};"
            " increase the damping."
        )


def _solve_r(R: Matrix, rhs: Vector, trans: int = 0) -> Vector:
    if R.shape[1] == 0:
        return np.zeros(0)
    return sl.solve_triangular(R, rhs, trans=trans)


def _augment(J: Matrix, lam: float) -> Matrix:
    if lam == 0:
        return J
    return np.vstack([J, np.sqrt(lam) * np.eye(J.shape[1])])


def _pad(v: Vector, count: int) -> Vector:
    return np.concatenate([v, np.zeros(count)]) if count else v


def solve_full_qr(sys: BlockNormalSystem) -> t.Tuple[Vector, Vector]:
    J = _augment(sys.dense(), sys.lam)
    Q, R = householder_qr(J)
    _check_triangular(R, sys.size, "Full QR")
    if sys.gradient is None:
        r = _pad(sys.r, J.shape[0] - sys.r.size)
        dx = -_solve_r(R[: sys.size], Q.T @ r)
    else:
        dx = -_solve_r(R, _solve_r(R, sys.gradient, trans=1))
    return dx[: sys.n_y], dx[sys.n_y :]


@dataclass(frozen=True)
class _BlockFactor:
    q_z: Matrix
    r_z: Matrix
    t_mat: Matrix
    t_vec: Vector
    j_s: Matrix
    r_s: Vector


def _factor_block(
    j_y: Matrix, j_z: Matrix, r: Vector, lam: float, index: int
) -> _BlockFactor:
    c = j_z.shape[1]
    if c == 0:
        return _BlockFactor(
            q_z=np.zeros((j_z.shape[0], 0)),
            r_z=np.zeros((0, 0)),
            t_mat=np.zeros((0, j_y.shape[1])),
            t_vec=np.zeros(0),
            j_s=j_y,
            r_s=r,
        )
    pad = c if lam > 0 else 0
    j_z = _augment(j_z, lam)
    j_y = np.vstack([j_y, np.zeros((pad, j_y.shape[1]))])
    r = _pad(r, pad)
    q_z, r_z = householder_qr(j_z)
    _check_triangular(r_z, c, f"z-block {index}")
    t_mat = q_z.T @ j_y
    t_vec = q_z.T @ r
    return _BlockFactor(
        q_z=q_z,
        r_z=r_z,
        t_mat=t_mat,
        t_vec=t_vec,
        j_s=j_y - q_z @ t_mat,
        r_s=r,
    )


def _solve_reduced(
    sys: BlockNormalSystem, factors: t.List[_BlockFactor]
) -> t.Tuple[Vector, t.List[Vector]]:
    n_y = sys.n_y
    j_s = np.vstack([f.j_s for f in factors])
    r_s = np.concatenate([f.r_s for f in factors])
    if sys.lam > 0:
        j_s = _augment(j_s, sys.lam)
        r_s = _pad(r_s, n_y)
    q_s, r_s_mat = householder_qr(j_s)
    _check_triangular(r_s_mat, n_y, "Reduced y-system")

    if sys.gradient is None:
        dy = -_solve_r(r_s_mat[:n_y], q_s.T @ r_s)
        t_vecs = [f.t_vec for f in factors]
    else:
        g_y = sys.gradient[:n_y]
        g_z = sys.gradient[n_y:]
        t_vecs, g_r, start = [], g_y.copy(), 0
        for f in factors:
            c = f.r_z.shape[1]
            t_i = _solve_r(f.r_z, g_z[start : start + c], trans=1)
            g_r -= f.t_mat.T @ t_i
            t_vecs.append(t_i)
            start += c
        dy = -_solve_r(r_s_mat, _solve_r(r_s_mat, g_r, trans=1))

    dz = [
        -_solve_r(f.r_z, t_i + f.t_mat @ dy)
        for f, t_i in zip(factors, t_vecs)
    ]
    return dy, dz


def solve_block_qr(sys: BlockNormalSystem) -> t.Tuple[Vector, Vector]:
    if len(sys.j_z_blocks) != 1:
        raise SolverError(
            f"Block QR takes a single z-block, got {len(sys.j_z_blocks)};"
            " use solve_block_qr_blockdiag."
        )
    factor = _factor_block(sys.j_y, sys.j_z_blocks[0], sys.r, sys.lam, 0)
    dy, (dz,) = _solve_reduced(sys, [factor])
    return dy, dz


def solve_block_qr_blockdiag(
    sys: BlockNormalSystem,
) -> t.Tuple[Vector, Vector]:
    blocks = zip(sys.row_slices(), sys.j_z_blocks)
    factors = [
        _factor_block(sys.j_y[rows], j_z, sys.r[rows], sys.lam, i)
        for i, (rows, j_z) in enumerate(blocks)
    ]
    dy, dz = _solve_reduced(sys, factors)
    return dy, np.concatenate(dz) if dz else np.zeros(0)


def cg(
    op: Product,
    rhs: Vector,
    tol: float = INNER_CG_TOL,
    max_iter: int = INNER_CG_MAX,
    precond: t.Optional[Vector] = None,
) -> CGResult:
    """Preconditioned CG from x0 = 0.

    `precond` is the diagonal of the inverse preconditioner.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0:
        return CGResult(x, 0, 0.0)
    d = np.ones_like(rhs) if precond is None else np.asarray(precond)

    r = rhs.copy()
    z = d * r
    p = z.copy()
    rz = r @ z
    iterations = 0
    while iterations < max_iter:
        Ap = op(p)
        pAp = p @ Ap
        if not pAp > 0:
            raise IndefiniteSystemError(
                f"CG breakdown at iteration {iterations}:"
                f" p^T A p = {pAp:g}."
            )
        step = rz / pAp
        x += step * p
        r -= step * Ap
        iterations += 1
        if np.linalg.norm(r) <= tol * norm_rhs:
            break
        z = d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new

    relres = float(np.linalg.norm(op(x) - rhs) / norm_rhs)
    if iterations >= max_iter and relres > tol:
        _log.warning(
            "CG stopped at the iteration ceiling %d with relative"
            " residual %.3e.",
            max_iter,
            relres,
        )
    return CGResult(x, iterations, relres)


def solve_mixed_cg_direct(
    op: BlockHessianOperator,
    g_y: Vector,
    g_z: Vector,
    cg_tol: float = INNER_CG_TOL,
    cg_max: int = INNER_CG_MAX,
) -> t.Tuple[Vector, Vector, MixedSolveStats]:
    stats = MixedSolveStats()
    n_y = op.n_y

    def bzz_solve(rhs: Vector) -> Vector:
        result = cg(op.bzz, rhs, cg_tol, cg_max)
        stats.record(result, cg_tol)
        return result.x

    h = bzz_solve(g_z)
    b_s = np.empty((n_y, n_y))
    for i, e in enumerate(np.eye(n_y)):
        b_s[:, i] = op.byy(e) - op.byz(bzz_solve(op.bzy(e)))

    if n_y:
        b_s = 0.5 * (b_s + b_s.T)
        try:
            factor = sl.cho_factor(b_s)
        except sl.LinAlgError as error:
            raise IndefiniteSystemError(
                "Schur complement B_s is not positive definite;"
                " increase the damping."
            ) from error
        dy = -sl.cho_solve(factor, g_y - op.byz(h))
    else:
        dy = np.zeros(0)

    dz = -bzz_solve(g_z + op.bzy(dy))
    return dy, dz, stats


def solve_full_cg(
    op: BlockHessianOperator,
    g_y: Vector,
    g_z: Vector,
    tol: float = FULL_CG_TOL,
    max_iter: int = FULL_CG_MAX,
    scale: float = FULL_CG_SCALE,
) -> t.Tuple[Vector, Vector, CGResult]:
    precond = np.concatenate([np.full(op.n_y, scale), np.ones(op.n_z)])
    result = cg(
        op.matvec, -np.concatenate([g_y, g_z]), tol, max_iter, precond
    )
    return result.x[: op.n_y], result.x[op.n_y :], result


def schur_complement(B: Matrix, n_y: int) -> Matrix:
    B = np.asarray(B, dtype=float)
    byz, bzz = B[:n_y, n_y:], B[n_y:, n_y:]
    if bzz.size == 0:
        return B[:n_y, :n_y].copy()
    return B[:n_y, :n_y] - byz @ sl.solve(bzz, B[n_y:, :n_y])


def mixed_crossover_threshold(
    t_y: float, t_z: float, k_z: int, n_y: int
) -> float:
    """CG iteration count above which the mixed solver beats full CG."""
    if min(t_y, t_z, k_z, n_y) <= 0:
        raise ValueError("Crossover inputs must all be positive.")
    return n_y * (t_y + k_z * t_z) / (t_y + t_z)
