import typing as t

import numpy as np

from semired.loss import LossModel
from semired.model import DenseSeparableModel, SeparableProblem
from semired.optimizer import BoundBox, LinearSolver, OptimizerConfig, run
from semired.traces import RunTrace


class GaussianPeaksModel(DenseSeparableModel):
    """Gaussian peaks at shared centres plus a flat background.

    Column j < n_peaks of A(y) is exp(-(x - y_j)^2 / 2w^2); the last
    column is the background.
    """

    def __init__(
        self, grid: np.ndarray, n_peaks: int, width: float, n: int
    ):
        self.grid = np.asarray(grid, dtype=float)
        self.width = width
        super().__init__(
            n_y=n_peaks, m=self.grid.size, c=n_peaks + 1, n_blocks=n
        )

    def _peaks(self, y: np.ndarray):
        offsets = self.grid[:, None] - np.asarray(y)[None, :]
        return np.exp(-0.5 * (offsets / self.width) ** 2), offsets

    def matrix(self, y: np.ndarray) -> np.ndarray:
        peaks, _ = self._peaks(y)
        return np.column_stack([peaks, np.ones(self.m)])

    def derivative(self, j: int, y: np.ndarray) -> np.ndarray:
        peaks, offsets = self._peaks(y)
        D = np.zeros((self.m, self.c))
        D[:, j] = peaks[:, j] * offsets[:, j] / self.width**2
        return D


def fit_peaks(
    counts: np.ndarray,
    grid: np.ndarray,
    centres: t.Sequence[float],
    width: float,
) -> t.Tuple[np.ndarray, np.ndarray, RunTrace]:
    """Fit peak centres shared by every spectrum (column) of `counts`."""
    m, n = counts.shape
    n_peaks = len(centres)
    model = GaussianPeaksModel(grid, n_peaks, width, n)
    problem = SeparableProblem(
        model, LossModel.poisson(counts.ravel(order="F"))
    )

    z0 = np.tile(
        np.concatenate([np.full(n_peaks, counts.max()), [1.0]]), n
    )
    x0 = np.concatenate([centres, z0])
    lo = np.concatenate([np.full(n_peaks, grid[0]), np.zeros(model.n_z)])
    up = np.concatenate(
        [np.full(n_peaks, grid[-1]), np.full(model.n_z, np.inf)]
    )
    cfg = OptimizerConfig(
        linear_solver=LinearSolver.BLOCKDIAG_QR, adjust_k_max=2
    )

    x, trace = run(problem, BoundBox(lo, up), x0, cfg)
    y, z = problem.split(x)
    return y, z.reshape(n, n_peaks + 1), trace
