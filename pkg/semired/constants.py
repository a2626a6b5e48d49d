# Line search and damping defaults of the damped projected method
DELTA = 1e-4
ALPHA = 0.2
LAMBDA_MIN = 1e-20
LAMBDA_MAX = 1e20
LAMBDA0 = 1e-3
EPSILON0 = 2.2e-14
RHO_GOOD = 0.7
RHO_BAD = 0.01
J_MAX = 60  # alpha**60 ~ 1e-42 at alpha = 0.2
K_MAX_OUTER = 200
# Damping used on a singular solve when lambda is still zero
LAMBDA_RETRY_FLOOR = 1e-12

# tau = max(TAU_FLOOR, ||P(x0 - g0) - x0|| / TAU_REDUCTION)
TAU_FLOOR = 2.2e-15
TAU_REDUCTION = 1e8

# Krylov settings
INNER_CG_TOL = 1e-8
INNER_CG_MAX = 200
FULL_CG_TOL = 1e-6
FULL_CG_MAX = 40
FULL_CG_SCALE = 1e5

WEIGHTED_LS_EPS = 1.0
HUBER_THRESHOLD = 0.3

# Relative pivot size below which a triangular factor is singular
PIVOT_TOL = 1e-14

TRACE_COLUMNS = (
    "iter",
    "f",
    "proj_grad_norm",
    "lambda",
    "step_exp",
    "backtracks",
    "inner_iters",
    "cpu_ms",
    "active_count",
    "armijo_bound",
    "trial_f",
)
NONDETERMINISTIC_COLUMNS = ("cpu_ms",)
FLOAT_FORMAT = "{:.17e}"
