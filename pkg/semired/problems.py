import base64
import functools
import typing as t

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    PlainValidator,
    model_validator,
)

from semired.errors import ProblemError
from semired.loss import LossKind, LossModel
from semired.model import (
    DenseSeparableModel,
    SeparableModel,
    SeparableProblem,
)
from semired.optimizer import BoundBox

Vector = Matrix = np.ndarray
Count = int
Disk = t.Tuple[float, float, float]


def _to_array(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return value
    if isinstance(value, dict):
        try:
            raw = base64.b64decode(value["data"])
            array = np.frombuffer(raw, dtype=np.dtype(value["dtype"]))
            return array.reshape(value["shape"]).copy()
        except (KeyError, TypeError, ValueError) as error:
            raise ValueError(f"Malformed array record: {error}") from error
    return np.asarray(value, dtype=float)


def _from_array(array: np.ndarray) -> dict:
    array = np.ascontiguousarray(array)
    return {
        "dtype": array.dtype.str,
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


NDArray = t.Annotated[
    np.ndarray,
    PlainValidator(_to_array),
    PlainSerializer(_from_array, return_type=dict, when_used="json"),
]


class _Config(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def desk(cls, **overrides):
        return cls(**{**cls.DESK, **overrides})

    @classmethod
    def paper(cls, **overrides):
        return cls(**overrides)


class ExpSumConfig(_Config):
    kind: t.Literal["expsum"] = "expsum"
    c: Count = Field(4, ge=1)
    rates_true: t.Tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    m: Count = Field(1000, ge=1)
    t_end: float = Field(5.0, gt=0)
    n: Count = Field(100, ge=1)
    weight_scale: float = Field(10.0, gt=0)
    weight_spread: float = Field(1.2, ge=0)
    nonnegative_rates: bool = False
    noiseless: bool = False
    seed: int = 0

    DESK: t.ClassVar[dict] = dict(
        c=2, rates_true=(1.0, 3.0), m=200, n=20, nonnegative_rates=True
    )

    @model_validator(mode="after")
    def _check_rates(self) -> "ExpSumConfig":
        rates = np.asarray(self.rates_true)
        if rates.size != self.c:
            raise ValueError(
                f"Expected {self.c} rates, got {rates.size}."
            )
        if np.any(rates <= 0) or np.unique(rates).size != rates.size:
            raise ValueError("Rates must be positive and distinct.")
        return self

    @property
    def times(self) -> Vector:
        return np.linspace(0.0, self.t_end, self.m)


class DeconvConfig(_Config):
    kind: t.Literal["deconv"] = "deconv"
    side: Count = Field(256, ge=4)
    n_frames: Count = Field(3, ge=1)
    segments: Count = Field(12, ge=1)
    alpha_true: float = Field(0.9, gt=0.5, le=1.0)
    beta_true: t.Optional[t.Tuple[float, ...]] = None
    background: float = Field(1000.0, gt=0)
    disk_radius: t.Optional[float] = Field(None, gt=0)
    mask_disks: t.Optional[t.Tuple[Disk, ...]] = None
    seed: int = 0

    DESK: t.ClassVar[dict] = dict(side=64, n_frames=2, segments=6)

    @model_validator(mode="after")
    def _check_shapes(self) -> "DeconvConfig":
        if self.beta_true is not None:
            beta = np.asarray(self.beta_true)
            if beta.size != self.segments or np.any(beta < 0):
                raise ValueError(
                    f"beta_true needs {self.segments} nonnegative entries."
                )
        if self.mask_disks is not None and (
            len(self.mask_disks) != self.n_frames
        ):
            raise ValueError("Give one mask disk per frame.")
        return self

    @property
    def beta(self) -> Vector:
        if self.beta_true is None:
            return np.linspace(1.0, 3.0, self.segments)
        return np.asarray(self.beta_true, dtype=float)

    @property
    def y_true(self) -> Vector:
        return np.concatenate([[self.alpha_true], self.beta])

    def disks(self) -> t.List[Disk]:
        """(row, col, radius) per frame; corners cycle, the seed jitters."""
        if self.mask_disks is not None:
            return [tuple(d) for d in self.mask_disks]
        s = self.side
        radius = self.disk_radius or s / 4
        corners = [
            (s / 4, s / 4),
            (s / 4, 3 * s / 4),
            (3 * s / 4, 3 * s / 4),
            (3 * s / 4, s / 4),
        ]
        rng = np.random.default_rng(self.seed)
        shift = s // 16
        jitter = rng.integers(-shift, shift + 1, size=(self.n_frames, 2))
        return [
            (
                corners[k % 4][0] + float(jitter[k, 0]),
                corners[k % 4][1] + float(jitter[k, 1]),
                radius,
            )
            for k in range(self.n_frames)
        ]


class ToyConfig(_Config):
    kind: t.Literal["toy"] = "toy"
    rho: float = Field(1e-2, gt=0, le=1)
    huber_t: float = Field(0.3, gt=0)
    y_true: float = 0.7
    z_true: float = 1.0
    y0: float = 0.02
    z0: float = 0.02

    DESK: t.ClassVar[dict] = dict()


ProblemConfig = t.Annotated[
    t.Union[ExpSumConfig, DeconvConfig, ToyConfig],
    Field(discriminator="kind"),
]


class ExponentialSumModel(DenseSeparableModel):
    """A(y)_ij = exp(-y_j t_i), shared by n measurement vectors."""

    def __init__(self, times: Vector, c: Count, n_blocks: Count = 1):
        self.times = np.asarray(times, dtype=float)
        super().__init__(n_y=c, m=self.times.size, c=c, n_blocks=n_blocks)

    def matrix(self, y: Vector) -> Matrix:
        return np.exp(-np.outer(self.times, y))

    def derivative(self, j: int, y: Vector) -> Matrix:
        D = np.zeros((self.m, self.c))
        D[:, j] = -self.times * np.exp(-y[j] * self.times)
        return D

    def second_derivative(self, i: int, j: int, y: Vector) -> Matrix:
        D = np.zeros((self.m, self.c))
        if i == j:
            D[:, j] = self.times**2 * np.exp(-y[j] * self.times)
        return D


class ToyModel(DenseSeparableModel):
    """mu = (q_1 - rho, q_2) = A(y) z with a single 2 x 1 block."""

    def __init__(self, rho: float):
        self.rho = rho
        super().__init__(n_y=1, m=2, c=1)

    def matrix(self, y: Vector) -> Matrix:
        return np.array([[y[0] * (1 - self.rho)], [(1 - y[0]) * self.rho]])

    def derivative(self, j: int, y: Vector) -> Matrix:
        return np.array([[1 - self.rho], [-self.rho]])

    def second_derivative(self, i: int, j: int, y: Vector) -> Matrix:
        return np.zeros((2, 1))


def _periodic_radius(side: Count) -> Matrix:
    d = np.arange(side)
    d = np.minimum(d, side - d).astype(float)
    return np.hypot(d[:, None], d[None, :])


def _breakpoints(segments: Count, side: Count) -> Vector:
    outer = np.log(np.sqrt(2) / 2 * side)
    return np.exp(np.linspace(0.0, outer, segments + 1))


def _segment_logs(segments: Count, side: Count) -> Matrix:
    """l_k(r) = clip(log r, log r_k, log r_k+1) - log r_k; shape (S, s, s)
    """
    r = _periodic_radius(side)
    log_r = np.log(np.where(r > 0, r, 1.0))
    log_b = np.log(_breakpoints(segments, side))
    return np.stack(
        [
            np.clip(log_r, log_b[k], log_b[k + 1]) - log_b[k]
            for k in range(segments)
        ]
    )


def _wing(beta: Vector, side: Count) -> t.Tuple[Matrix, Matrix]:
    logs = _segment_logs(len(beta), side)
    p = np.exp(-np.tensordot(beta, logs, axes=1))
    p[0, 0] = 0.0
    return p / p.sum(), logs


def psf_build(alpha: float, beta: Vector, side: Count) -> Matrix:
    """h = alpha delta_0 + (1 - alpha) p_beta, centred at pixel [0, 0]."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ProblemError("PSF exponents beta must be nonnegative.")
    wing, _ = _wing(beta, side)
    kernel = (1 - alpha) * wing
    kernel[0, 0] += alpha
    return kernel


def psf_segments(beta: Vector, side: Count) -> t.Tuple[Vector, Vector]:
    """Breakpoints r_k and offsets o_k with log p(r) = o_k - beta_k log r
    on [r_k, r_k+1] (unnormalized)."""
    beta = np.asarray(beta, dtype=float)
    log_b = np.log(_breakpoints(beta.size, side))
    widths = np.diff(log_b)
    below = np.concatenate([[0.0], np.cumsum(beta * widths)[:-1]])
    return np.exp(log_b), beta * log_b[:-1] - below


def psf_jacobian(
    alpha: float, beta: Vector, side: Count
) -> t.Tuple[Matrix, Matrix]:
    """dh/dalpha and the stack of dh/dbeta_k."""
    beta = np.asarray(beta, dtype=float)
    wing, logs = _wing(beta, side)
    d_alpha = -wing
    d_alpha[0, 0] += 1.0
    mean_logs = np.tensordot(logs, wing, axes=2)
    d_beta = (1 - alpha) * wing * (mean_logs[:, None, None] - logs)
    return d_alpha, d_beta


@functools.lru_cache(maxsize=8)
def _spectra(alpha: float, beta: t.Tuple[float, ...], side: Count):
    kernel = psf_build(alpha, beta, side)
    d_alpha, d_beta = psf_jacobian(alpha, beta, side)
    return np.fft.rfft2(np.concatenate([[kernel, d_alpha], d_beta]))


class ConvolutionModel(SeparableModel):
    """Periodic convolution of n frames with a shared PSF h_y.

    y = (alpha, beta_1..beta_S); z stacks the side x side frames.
    """

    def __init__(self, side: Count, n_frames: Count, segments: Count):
        self.side = side
        self.segments = segments
        self.n_y = 1 + segments
        self.m = self.c = side * side
        self.n_blocks = n_frames

    def _spectrum(self, y: Vector, index: int) -> Matrix:
        y = np.asarray(y, dtype=float)
        beta = tuple(y[1:].tolist())
        return _spectra(float(y[0]), beta, self.side)[index]

    def _frames(self, v: Vector) -> Matrix:
        return np.asarray(v, dtype=float).reshape(
            self.n_blocks, self.side, self.side
        )

    def _convolve(
        self, spectrum: Matrix, v: Vector, adjoint: bool = False
    ) -> Vector:
        if adjoint:
            spectrum = np.conj(spectrum)
        frames = np.fft.rfft2(self._frames(v))
        shape = (self.side, self.side)
        return np.fft.irfft2(frames * spectrum, s=shape).ravel()

    def apply(self, y: Vector, z: Vector) -> Vector:
        return self._convolve(self._spectrum(y, 0), z)

    def apply_dA(self, j: int, y: Vector, z: Vector) -> Vector:
        return self._convolve(self._spectrum(y, 1 + j), z)

    def apply_At(self, y: Vector, v: Vector) -> Vector:
        return self._convolve(self._spectrum(y, 0), v, adjoint=True)

    def apply_dAt(self, j: int, y: Vector, v: Vector) -> Vector:
        return self._convolve(self._spectrum(y, 1 + j), v, adjoint=True)


def sample_poisson(rng: np.random.Generator, mean: Matrix) -> Matrix:
    return rng.poisson(np.asarray(mean, dtype=float)).astype(float)


def toy_objective(
    cfg: ToyConfig, y: float, z: float
) -> t.Tuple[float, float, float]:
    rho, th = cfg.rho, cfg.huber_t

    def q(y, z):
        return y * z + (1 - y * z) * rho, (1 - y) * z * rho

    def huber(x):
        if abs(x) <= th:
            return 0.5 * x * x, x
        return th * (abs(x) - 0.5 * th), th * np.sign(x)

    q1, q2 = q(y, z)
    q1_t, q2_t = q(cfg.y_true, cfg.z_true)
    l1, d1 = huber(q1 - q1_t)
    l2, d2 = huber(q2 - q2_t)
    f = rho * l1 + (1 - rho) * l2
    g_y = rho * d1 * z * (1 - rho) - (1 - rho) * d2 * z * rho
    g_z = rho * d1 * y * (1 - rho) + (1 - rho) * d2 * (1 - y) * rho
    return float(f), float(g_y), float(g_z)


class ProblemInstance(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    config: ProblemConfig
    data: NDArray
    x_true: NDArray
    x0: NDArray
    lo: NDArray
    up: NDArray
    loss_kind: LossKind

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def n_y(self) -> Count:
        return self.model().n_y

    def model(self) -> SeparableModel:
        cfg = self.config
        if isinstance(cfg, ExpSumConfig):
            return ExponentialSumModel(cfg.times, cfg.c, cfg.n)
        if isinstance(cfg, DeconvConfig):
            return ConvolutionModel(cfg.side, cfg.n_frames, cfg.segments)
        return ToyModel(cfg.rho)

    def loss(self, kind: t.Optional[LossKind] = None) -> LossModel:
        kind = LossKind(kind or self.loss_kind)
        cfg = self.config
        if isinstance(cfg, ToyConfig):
            if kind != LossKind.HUBER:
                raise ProblemError("The toy problem uses the Huber loss.")
            scale = np.array([cfg.rho, 1 - cfg.rho])
            return LossModel.huber(self.data, cfg.huber_t, scale=scale)
        if kind == LossKind.HUBER:
            raise ProblemError(f"The {cfg.kind} problem has no Huber loss.")
        return LossModel(kind, self.data)

    def problem(
        self, kind: t.Optional[LossKind] = None
    ) -> SeparableProblem:
        return SeparableProblem(self.model(), self.loss(kind))

    def box(self) -> BoundBox:
        return BoundBox(self.lo, self.up)


def gen_expsum(cfg: ExpSumConfig) -> ProblemInstance:
    rng = np.random.default_rng(cfg.seed)
    rates = np.asarray(cfg.rates_true, dtype=float)
    weights = cfg.weight_scale * np.exp(
        cfg.weight_spread * rng.standard_normal((cfg.c, cfg.n))
    )
    mean = np.exp(-np.outer(cfg.times, rates)) @ weights
    counts = mean if cfg.noiseless else sample_poisson(rng, mean)

    n_z = cfg.c * cfg.n
    y_lo = 0.0 if cfg.nonnegative_rates else -np.inf
    return ProblemInstance(
        config=cfg,
        data=counts.ravel(order="F"),
        x_true=np.concatenate([rates, weights.ravel(order="F")]),
        x0=np.concatenate(
            [
                np.linspace(0.5, cfg.c + 0.5, cfg.c),
                np.full(n_z, cfg.weight_scale),
            ]
        ),
        lo=np.concatenate([np.full(cfg.c, y_lo), np.zeros(n_z)]),
        up=np.full(cfg.c + n_z, np.inf),
        loss_kind=LossKind.POISSON,
    )


def _disk_mask(
    side: Count, row: float, col: float, radius: float
) -> Matrix:
    rows, cols = np.mgrid[:side, :side]
    return (rows - row) ** 2 + (cols - col) ** 2 <= radius**2


def gen_deconv(cfg: DeconvConfig) -> ProblemInstance:
    s = cfg.side
    masks = np.stack([_disk_mask(s, *disk) for disk in cfg.disks()])
    frames = np.where(masks, 0.0, cfg.background)

    model = ConvolutionModel(s, cfg.n_frames, cfg.segments)
    y_true = cfg.y_true
    z_true = frames.ravel()
    data = model.apply(y_true, z_true)

    n_y = model.n_y
    lo = np.concatenate(
        [
            [np.nextafter(0.5, 1.0)],
            np.zeros(cfg.segments),
            np.zeros(model.n_z),
        ]
    )
    up = np.concatenate(
        [[1.0], np.full(cfg.segments, np.inf), np.full(model.n_z, np.inf)]
    )
    up[n_y:][masks.ravel()] = 0.0

    z0 = np.clip(data, lo[n_y:], up[n_y:])
    y0 = np.concatenate([[0.75], np.ones(cfg.segments)])
    return ProblemInstance(
        config=cfg,
        data=data,
        x_true=np.concatenate([y_true, z_true]),
        x0=np.concatenate([y0, z0]),
        lo=lo,
        up=up,
        loss_kind=LossKind.LEAST_SQUARES,
    )


def gen_toy(cfg: ToyConfig) -> ProblemInstance:
    rho = cfg.rho
    yz = cfg.y_true * cfg.z_true
    data = np.array([yz * (1 - rho), (1 - cfg.y_true) * cfg.z_true * rho])
    return ProblemInstance(
        config=cfg,
        data=data,
        x_true=np.array([cfg.y_true, cfg.z_true]),
        x0=np.array([cfg.y0, cfg.z0]),
        lo=np.zeros(2),
        up=np.array([1.0, np.inf]),
        loss_kind=LossKind.HUBER,
    )


def generate(cfg: t.Union[ExpSumConfig, DeconvConfig, ToyConfig]):
    if isinstance(cfg, ExpSumConfig):
        return gen_expsum(cfg)
    if isinstance(cfg, DeconvConfig):
        return gen_deconv(cfg)
    return gen_toy(cfg)
