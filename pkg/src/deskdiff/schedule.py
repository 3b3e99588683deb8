"""Variance schedules and every per-timestep constant derived from them.

All arrays have length ``T + 1`` and are indexed directly by the timestep
``t`` in ``1..T``. Index 0 holds the boundary values ``beta=0``,
``alpha=1``, ``alpha_bar=1``, which is what makes ``beta_tilde[1] = 0`` fall
out of the general formula.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

# stands in for log(beta_tilde_1) = log(0) in the variance interpolation
T1_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    log_betas: np.ndarray
    log_beta_tilde: np.ndarray
    kind: str = "custom"

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def check_t(self, t):
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ParameterError(f"timestep must be an integer, got {t!r}")
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.T):
            raise ParameterError(f"timestep out of range 1..{self.T}: {t!r}")
        return t_arr

    def to_arrays(self):
        """Named float64 arrays for checkpoint manifests (log arrays are re-derived on load)."""
        return {
            "betas": np.array(self.betas),
            "alphas": np.array(self.alphas),
            "alpha_bar": np.array(self.alpha_bar),
            "beta_tilde": np.array(self.beta_tilde),
        }

    @classmethod
    def from_arrays(cls, arrays, kind="custom"):
        return derive(np.asarray(arrays["betas"], dtype=np.float64)[1:], kind=kind)


def derive(betas, kind="custom") -> NoiseSchedule:
    """Build the full schedule from ``betas[1..T]`` (passed as a length-T array)."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ParameterError("betas must be a non-empty 1-D array")
    if not np.all((betas > 0) & (betas < 1)):
        raise ParameterError("every beta_t must lie in (0, 1)")
    b = np.concatenate([[0.0], betas])
    a = 1.0 - b
    abar = np.cumprod(a)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    bt = np.zeros_like(b)
    bt[1:] = b[1:] * (1.0 - abar_prev[1:]) / (1.0 - abar[1:])
    log_b = np.full_like(b, -np.inf)
    log_b[1:] = np.log(b[1:])
    log_bt = np.full_like(b, -np.inf)
    log_bt[1] = np.log(T1_VARIANCE_FLOOR)
    log_bt[2:] = np.log(bt[2:])
    for arr in (b, a, abar, bt, log_b, log_bt):
        arr.setflags(write=False)
    return NoiseSchedule(b, a, abar, bt, log_b, log_bt, kind)


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ParameterError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    return derive(np.linspace(beta_start, beta_end, T), kind="linear")


def default_linear_schedule(T: int) -> NoiseSchedule:
    """The 1e-4 .. 0.02 endpoints of a 1000-step chain, rescaled for ``T`` steps."""
    scale = 1000.0 / T
    return linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def cosine_schedule(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if offset <= 0:
        raise ParameterError(f"cosine offset must be positive, got {offset}")

    def f(t):
        return np.cos((t / T + offset) / (1 + offset) * np.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    abar = f(steps) / f(0.0)
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], max_beta)
    return derive(betas, kind="cosine")


def make_schedule(kind: str, T: int, **kwargs) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(T, **kwargs)
    if kind == "linear":
        if kwargs:
            return linear_schedule(T, **kwargs)
        return default_linear_schedule(T)
    raise ParameterError(f"unknown schedule kind {kind!r}; expected 'cosine' or 'linear'")
