"""Optimizer step rules: plain SGD and sign baselines, the adaptive
block-coordinate family with EMA and conditional second-moment estimators,
Adam, decoupled weight decay, and the conceptual (exact-moment) update.

All steps are functional: they take (config, state, x, g) and return a fresh
(x, state) pair, so trajectories can be replayed and compared bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BlockPartition, NonFiniteError, ParamVector, ShapeError

ALGORITHMS = (
    "sgd",
    "sgd_momentum",
    "sign_sgd",
    "sign_momentum",
    "bcos_g",
    "bcos_m",
    "bcos_c",
    "adam",
    "conceptual_bcos",
)

EPSILON_PLACEMENTS = ("outside_sqrt", "inside_sqrt")
BIAS_CORRECTIONS = ("init_first_sample", "zero_init_rescale")

# Algorithms whose state carries a momentum vector / a second-moment vector.
_HAS_M = ("sgd_momentum", "sign_momentum", "bcos_m", "bcos_c", "adam")
_HAS_V = ("bcos_g", "bcos_m", "adam")


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-6
    epsilon_placement: str = "outside_sqrt"
    weight_decay_lambda: float = 0.0
    decoupled: bool = False
    bias_correction: str = "init_first_sample"
    # Optional richer conditional estimator for bcos_c (keeps the momentum
    # cross term instead of folding it into the previous momentum square).
    conditional_full: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise OptimizerError(f"unknown algorithm {self.algorithm!r}")
        if not (0.0 <= self.beta1 < 1.0):
            raise OptimizerError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not (0.0 <= self.beta2 < 1.0):
            raise OptimizerError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if self.epsilon < 0.0:
            raise OptimizerError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon_placement not in EPSILON_PLACEMENTS:
            raise OptimizerError(f"unknown epsilon_placement {self.epsilon_placement!r}")
        if self.bias_correction not in BIAS_CORRECTIONS:
            raise OptimizerError(f"unknown bias_correction {self.bias_correction!r}")
        if self.weight_decay_lambda < 0.0:
            raise OptimizerError("weight_decay_lambda must be >= 0")
        if self.conditional_full and self.algorithm != "bcos_c":
            raise OptimizerError("conditional_full only applies to bcos_c")


@dataclass(frozen=True)
class OptimizerState:
    """Persistent per-optimizer state.

    ``m`` is a per-coordinate momentum vector, ``v`` a per-block second-moment
    estimate; either is None when the algorithm does not store it (bcos_c in
    particular keeps no ``v`` between steps).
    """

    t: int = 0
    initialized: bool = False
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.v is not None and np.any(np.asarray(self.v) < 0):
            raise OptimizerError("second-moment state must be nonnegative")


def init_state() -> OptimizerState:
    return OptimizerState()


def state_vector_count(state: OptimizerState) -> int:
    """Number of persistent vectors the state stores (memory footprint)."""
    return int(state.m is not None) + int(state.v is not None)


def expected_state_vectors(config: OptimizerConfig) -> int:
    return int(config.algorithm in _HAS_M) + int(config.algorithm in _HAS_V)


@dataclass(frozen=True)
class MomentOracle:
    """Exact conditional moments of a search direction.

    mean_d is per coordinate; second_moment_d holds E[||d_k||^2] per block of
    ``partition``. The mean-variance split forces
    second_moment_d[k] >= ||mean over block k||^2.
    """

    mean_d: np.ndarray
    second_moment_d: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        mean = np.array(self.mean_d, dtype=np.float64, copy=True)
        second = np.array(self.second_moment_d, dtype=np.float64, copy=True)
        if mean.shape != (self.partition.total_dim,):
            raise ShapeError("mean_d length must match the partition dimension")
        if second.shape != (self.partition.num_blocks,):
            raise ShapeError("second_moment_d must have one entry per block")
        if np.any(second < 0):
            raise OptimizerError("second moments must be nonnegative")
        mean_sq = self.partition.block_sums(mean * mean)
        if np.any(second < mean_sq * (1.0 - 1e-12) - 1e-300):
            raise OptimizerError(
                "second moment below squared block mean; not a valid moment pair"
            )
        object.__setattr__(self, "mean_d", mean)
        object.__setattr__(self, "second_moment_d", second)


def _check_gradient(x: ParamVector, g: ParamVector) -> np.ndarray:
    gv = g.values
    if gv.shape != x.values.shape:
        raise ShapeError(f"gradient length {gv.shape[0]} != parameter length {len(x)}")
    if not np.all(np.isfinite(gv)):
        raise NonFiniteError("gradient contains NaN/Inf entries")
    return gv


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise num/den with the 0/0 -> 0 convention (only reachable when
    epsilon = 0 and both the direction and its estimate vanish)."""
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _denominator(v_used: np.ndarray, config: OptimizerConfig) -> np.ndarray:
    if config.epsilon_placement == "outside_sqrt":
        return np.sqrt(v_used) + config.epsilon
    return np.sqrt(v_used + config.epsilon)


def step(
    config: OptimizerConfig,
    state: OptimizerState,
    x: ParamVector,
    g: ParamVector,
    alpha_t: float,
) -> tuple[ParamVector, OptimizerState]:
    """One optimizer step; returns the new iterate and the new state.

    With decoupled weight decay the iterate is first shrunk by
    (1 - alpha_t*lambda); without it, lambda*x is folded into the gradient
    before any state update. In block mode (fewer blocks than coordinates)
    the second-moment estimate is one scalar per block, built from the block
    squared norm, and that scalar stepsize applies to every coordinate of
    the block.
    """
    if config.algorithm == "conceptual_bcos":
        raise OptimizerError("conceptual_bcos needs exact moments; use conceptual_step")
    if alpha_t < 0:
        raise OptimizerError(f"alpha_t must be >= 0, got {alpha_t}")
    gv = _check_gradient(x, g)
    part = x.partition
    lam = config.weight_decay_lambda
    decay = 1.0
    if lam > 0 and config.decoupled:
        if alpha_t * lam >= 1.0:
            raise OptimizerError(
                f"decoupled decay needs alpha_t*lambda < 1, got {alpha_t * lam}"
            )
        decay = 1.0 - alpha_t * lam
        d = gv
    elif lam > 0:
        d = gv + lam * x.values
    else:
        d = gv

    alg = config.algorithm
    t = state.t
    rescale = config.bias_correction == "zero_init_rescale"

    m_prev = state.m
    v_prev = state.v
    if not state.initialized:
        if rescale:
            m_prev = np.zeros(len(x))
            v_prev = np.zeros(part.num_blocks)
        else:
            m_prev = d.copy()
            v_prev = part.block_sums(d * d)

    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** (t + 1)
    c2 = 1.0 - b2 ** (t + 1)

    m_new = None
    v_new = None
    if alg == "sgd":
        update = d
    elif alg == "sign_sgd":
        update = np.sign(d)
    elif alg in ("sgd_momentum", "sign_momentum"):
        m_new = b1 * m_prev + (1.0 - b1) * d
        m_used = m_new / c1 if rescale else m_new
        update = np.sign(m_used) if alg == "sign_momentum" else m_used
    elif alg == "bcos_g":
        v_new = b1 * v_prev + (1.0 - b1) * part.block_sums(d * d)
        v_used = v_new / c1 if rescale else v_new
        den = part.expand(_denominator(v_used, config))
        update = _safe_divide(d, den)
    elif alg == "bcos_m":
        m_new = b1 * m_prev + (1.0 - b1) * d
        m_used = m_new / c1 if rescale else m_new
        # the estimate tracks the direction the update uses, so under
        # rescaling it averages the corrected momentum square
        v_new = b2 * v_prev + (1.0 - b2) * part.block_sums(m_used * m_used)
        v_used = v_new / c2 if rescale else v_new
        den = part.expand(_denominator(v_used, config))
        update = _safe_divide(m_used, den)
    elif alg == "adam":
        m_new = b1 * m_prev + (1.0 - b1) * d
        v_new = b2 * v_prev + (1.0 - b2) * part.block_sums(d * d)
        m_used = m_new / c1 if rescale else m_new
        v_used = v_new / c2 if rescale else v_new
        den = part.expand(_denominator(v_used, config))
        update = _safe_divide(m_used, den)
    elif alg == "bcos_c":
        # The previous momentum is read before the momentum update; the
        # estimate combines it with the fresh gradient, so no v is stored.
        m_new = b1 * m_prev + (1.0 - b1) * d
        m_used = m_new / c1 if rescale else m_new
        one_minus = 1.0 - b1
        beta_eff = 1.0 - one_minus**2
        if rescale:
            # combine corrected quantities; with no history yet the missing
            # momentum weight renormalizes away
            m_prev_used = m_prev / (1.0 - b1**t) if t > 0 else m_prev
            mass = (beta_eff if t > 0 else 0.0) + one_minus**2
        else:
            m_prev_used = m_prev
            mass = 1.0
        if config.conditional_full:
            v_t = (
                b1**2 * part.block_sums(m_prev_used * m_prev_used)
                + 2.0 * b1 * one_minus * part.block_sums(m_prev_used * m_used)
                + one_minus**2 * part.block_sums(d * d)
            )
        else:
            v_t = (
                beta_eff * part.block_sums(m_prev_used * m_prev_used)
                + one_minus**2 * part.block_sums(d * d)
            )
        v_used = v_t / mass if mass != 1.0 else v_t
        den = part.expand(_denominator(v_used, config))
        update = _safe_divide(m_used, den)
    else:  # pragma: no cover - guarded by the config validator
        raise OptimizerError(f"unhandled algorithm {alg!r}")

    x_new = decay * x.values - alpha_t * update
    if not np.all(np.isfinite(x_new)):
        raise NonFiniteError(f"{alg} step produced non-finite parameters")

    keep_m = m_new if alg in _HAS_M else None
    keep_v = v_new if alg in _HAS_V else None
    new_state = OptimizerState(t=t + 1, initialized=True, m=keep_m, v=keep_v)
    return ParamVector(x_new, part), new_state


def conceptual_step(
    oracle: MomentOracle,
    x: ParamVector,
    d_sample: ParamVector,
    alpha_t: float,
    lam: float = 0.0,
) -> ParamVector:
    """Idealized update with the exact per-block second moment in the
    denominator (no epsilon): x <- (1 - alpha*lambda) x - alpha * d / sqrt(E[d^2])."""
    second = oracle.second_moment_d
    if np.any(second <= 0):
        raise OptimizerError("conceptual step needs strictly positive second moments")
    den = oracle.partition.expand(np.sqrt(second))
    x_new = (1.0 - alpha_t * lam) * x.values - alpha_t * d_sample.values / den
    return ParamVector(x_new, x.partition)


def optimal_stepsizes(oracle: MomentOracle, x: ParamVector, x_star: ParamVector) -> np.ndarray:
    """Per-block stepsizes minimizing the expected squared distance of the
    next iterate to the target: <x_k - x*_k, E[d_k]> / E[||d_k||^2].
    They can be positive or negative."""
    second = oracle.second_moment_d
    if np.any(second <= 0):
        raise OptimizerError("optimal stepsizes need strictly positive second moments")
    diff = x.values - x_star.values
    num = oracle.partition.block_sums(diff * oracle.mean_d)
    return num / second


def signal_fraction(oracle: MomentOracle) -> np.ndarray:
    """Per-block fraction of the second moment carried by the mean,
    ||E[d_k]||^2 / E[||d_k||^2], always in [0, 1]."""
    second = oracle.second_moment_d
    if np.any(second <= 0):
        raise OptimizerError("signal fraction needs strictly positive second moments")
    mean_sq = oracle.partition.block_sums(oracle.mean_d * oracle.mean_d)
    return np.minimum(mean_sq / second, 1.0)


def trace_rows(
    config: OptimizerConfig,
    x0: ParamVector,
    gradients: np.ndarray,
    alphas,
) -> list[str]:
    """Replay a fixed gradient stream and emit one CSV row per step with the
    full state (t, x..., m..., v...), using round-trip float formatting so two
    replays can be compared byte for byte."""
    x = x0
    state = init_state()
    rows = []

    def fmt(arr, width):
        if arr is None:
            return ["" for _ in range(width)]
        return [repr(float(u)) for u in np.asarray(arr)]

    n = len(x0)
    m = x0.partition.num_blocks
    header = (
        ["t"]
        + [f"x{i}" for i in range(n)]
        + [f"m{i}" for i in range(n)]
        + [f"v{k}" for k in range(m)]
    )
    rows.append(",".join(header))
    for t, g in enumerate(np.asarray(gradients, dtype=np.float64)):
        alpha = alphas[t] if hasattr(alphas, "__getitem__") else alphas
        x, state = step(config, state, x, ParamVector(g, x0.partition), float(alpha))
        rows.append(
            ",".join([str(state.t)] + fmt(x.values, n) + fmt(state.m, n) + fmt(state.v, m))
        )
    return rows


__all__ = [
    "ALGORITHMS",
    "MomentOracle",
    "OptimizerConfig",
    "OptimizerError",
    "OptimizerState",
    "conceptual_step",
    "expected_state_vectors",
    "init_state",
    "optimal_stepsizes",
    "signal_fraction",
    "state_vector_count",
    "step",
    "trace_rows",
]
