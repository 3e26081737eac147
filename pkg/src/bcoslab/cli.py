"""Reproducible experiment runner.

Subcommands: run (trajectory ensembles to CSV), sweep (grid over one or two
hyperparameters), verify (the numerical verifier suite), counterexamples.
Configs are flat key = value text files; every run writes a manifest with a
config hash and content hashes of its outputs, and output bytes are a pure
function of (config, base_seed).

Exit codes: 0 success, 1 verifier failure or divergence, 2 config error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import analysis, problems, schedules
from .analysis import CheckResult, DivergenceError, MeanCurve
from .optim import OptimizerConfig, OptimizerState, init_state
from .problems import LogisticSmokeProblem, NoisyQuadratic
from .schedules import StepSchedule


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config field {key!r}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    problem_kind: str = "quadratic"
    dim: int = 4
    h: tuple = (1.0,)
    sigma: tuple = (1.0,)
    x_star: tuple = (0.0,)
    x0: tuple = (3.0,)
    noise: str = "gaussian"
    n_samples: int = 1000
    batch: int = 32
    data_seed: int = 2024
    algorithm: str = "bcos_c"
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-6
    epsilon_placement: str = "outside_sqrt"
    weight_decay_lambda: float = 0.0
    decoupled: bool = False
    bias_correction: str = "init_first_sample"
    conditional_full: bool = False
    schedule_kind: str = "constant"
    alpha: float = 0.1
    p: float = 0.75
    warmup_steps: int = 0
    total_steps: int = 0
    alpha_min_ratio: float = 0.0
    steps: int = 100
    n_seeds: int = 4
    base_seed: int = 0
    output_dir: str = "out"
    # cadence for sampling estimator diagnostics along the first seed
    # (0 disables; fills the CSV sigma_t column at those steps)
    sigma_every: int = 0
    verify_counterexamples: bool = True
    verify_chung: bool = True
    verify_ratio_expansion: bool = True
    verify_estimator_stats: bool = True
    # fault-injection knob: when set, the estimator verifier computes its
    # expected-variance references with this beta instead of the optimizer's,
    # so the failure path of the harness itself can be exercised
    negative_control_beta: float | None = None
    sweep_param: str = ""
    sweep_values: tuple = ()
    sweep_param2: str = ""
    sweep_values2: tuple = ()


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_floats(raw: str) -> tuple:
    return tuple(float(tok) for tok in raw.split(",") if tok.strip() != "")


def _parse_opt_float(raw: str):
    return None if raw.strip().lower() in ("", "none") else float(raw)


def _fmt_opt_float(v) -> str:
    return "none" if v is None else repr(float(v))


def _fmt_floats(vals: tuple) -> str:
    return ",".join(repr(float(v)) for v in vals)


# key -> (attribute, parser, formatter)
KEY_TABLE = {
    "problem.kind": ("problem_kind", str.strip, str),
    "problem.dim": ("dim", int, str),
    "problem.h": ("h", _parse_floats, _fmt_floats),
    "problem.sigma": ("sigma", _parse_floats, _fmt_floats),
    "problem.x_star": ("x_star", _parse_floats, _fmt_floats),
    "problem.x0": ("x0", _parse_floats, _fmt_floats),
    "problem.noise": ("noise", str.strip, str),
    "problem.n_samples": ("n_samples", int, str),
    "problem.batch": ("batch", int, str),
    "problem.data_seed": ("data_seed", int, str),
    "optimizer.algorithm": ("algorithm", str.strip, str),
    "optimizer.beta1": ("beta1", float, repr),
    "optimizer.beta2": ("beta2", float, repr),
    "optimizer.epsilon": ("epsilon", float, repr),
    "optimizer.epsilon_placement": ("epsilon_placement", str.strip, str),
    "optimizer.weight_decay_lambda": ("weight_decay_lambda", float, repr),
    "optimizer.decoupled": ("decoupled", _parse_bool, lambda b: str(bool(b)).lower()),
    "optimizer.bias_correction": ("bias_correction", str.strip, str),
    "optimizer.conditional_full": ("conditional_full", _parse_bool, lambda b: str(bool(b)).lower()),
    "schedule.kind": ("schedule_kind", str.strip, str),
    "schedule.alpha": ("alpha", float, repr),
    "schedule.p": ("p", float, repr),
    "schedule.warmup_steps": ("warmup_steps", int, str),
    "schedule.total_steps": ("total_steps", int, str),
    "schedule.alpha_min_ratio": ("alpha_min_ratio", float, repr),
    "run.steps": ("steps", int, str),
    "run.n_seeds": ("n_seeds", int, str),
    "run.base_seed": ("base_seed", int, str),
    "run.output_dir": ("output_dir", str.strip, str),
    "run.sigma_every": ("sigma_every", int, str),
    "verify.counterexamples": ("verify_counterexamples", _parse_bool, lambda b: str(bool(b)).lower()),
    "verify.chung": ("verify_chung", _parse_bool, lambda b: str(bool(b)).lower()),
    "verify.ratio_expansion": ("verify_ratio_expansion", _parse_bool, lambda b: str(bool(b)).lower()),
    "verify.estimator_stats": ("verify_estimator_stats", _parse_bool, lambda b: str(bool(b)).lower()),
    "verify.negative_control_beta": ("negative_control_beta", _parse_opt_float, _fmt_opt_float),
    "sweep.param": ("sweep_param", str.strip, str),
    "sweep.values": ("sweep_values", _parse_floats, _fmt_floats),
    "sweep.param2": ("sweep_param2", str.strip, str),
    "sweep.values2": ("sweep_values2", _parse_floats, _fmt_floats),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _, _) in KEY_TABLE.items()}


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key = value format; unknown keys and type errors raise
    ConfigError naming the offending field."""
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KEY_TABLE:
            raise ConfigError(key, "unknown key")
        attr, parser, _ = KEY_TABLE[key]
        try:
            setattr(cfg, attr, parser(value.strip()))
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from exc
    return cfg


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical serialization; parse(config_text(cfg)) == cfg."""
    lines = []
    for key in sorted(KEY_TABLE):
        attr, _, fmt = KEY_TABLE[key]
        lines.append(f"{key} = {fmt(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _broadcast(values: tuple, dim: int, key: str) -> np.ndarray:
    if len(values) == 1:
        return np.full(dim, float(values[0]))
    if len(values) != dim:
        raise ConfigError(key, f"expected 1 or {dim} values, got {len(values)}")
    return np.asarray(values, dtype=np.float64)


def build_problem(cfg: ExperimentConfig):
    if cfg.problem_kind == "quadratic":
        return NoisyQuadratic(
            h=_broadcast(cfg.h, cfg.dim, "problem.h"),
            sigma=_broadcast(cfg.sigma, cfg.dim, "problem.sigma"),
            x_star=_broadcast(cfg.x_star, cfg.dim, "problem.x_star"),
            noise=cfg.noise,
        )
    if cfg.problem_kind == "logistic":
        return LogisticSmokeProblem(
            n_features=cfg.dim,
            n_samples=cfg.n_samples,
            batch=cfg.batch,
            data_seed=cfg.data_seed,
        )
    raise ConfigError("problem.kind", f"unknown problem kind {cfg.problem_kind!r}")


def build_optimizer(cfg: ExperimentConfig) -> OptimizerConfig:
    try:
        return OptimizerConfig(
            algorithm=cfg.algorithm,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            epsilon=cfg.epsilon,
            epsilon_placement=cfg.epsilon_placement,
            weight_decay_lambda=cfg.weight_decay_lambda,
            decoupled=cfg.decoupled,
            bias_correction=cfg.bias_correction,
            conditional_full=cfg.conditional_full,
        )
    except ValueError as exc:
        raise ConfigError("optimizer", str(exc)) from exc


def build_schedule(cfg: ExperimentConfig) -> StepSchedule:
    try:
        return StepSchedule(
            kind=cfg.schedule_kind,
            alpha=cfg.alpha,
            p=cfg.p,
            warmup_steps=cfg.warmup_steps,
            total_steps=cfg.total_steps,
            alpha_min_ratio=cfg.alpha_min_ratio,
        )
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from exc


def _check_schedule_safety(cfg: ExperimentConfig, schedule: StepSchedule) -> None:
    """Hard safety condition only: with decoupled decay the peak stepsize must
    keep alpha*lambda <= 1. The summability flags the convergence theory wants
    are informational and do not block a run."""
    lam = cfg.weight_decay_lambda
    uses_decay = lam > 0 and (cfg.decoupled or cfg.algorithm == "conceptual_bcos")
    if uses_decay and schedules.peak_value(schedule) * lam > 1.0:
        raise ConfigError(
            "schedule.alpha",
            f"peak alpha*lambda = {schedules.peak_value(schedule) * lam} exceeds 1 "
            "with decoupled weight decay",
        )


def _x0(cfg: ExperimentConfig, problem) -> np.ndarray:
    if cfg.problem_kind == "logistic":
        return np.zeros(problem.dim)
    return _broadcast(cfg.x0, cfg.dim, "problem.x0")


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x: float) -> str:
    return repr(float(x))


def curve_csv(curve: MeanCurve) -> str:
    lines = ["t,mean_dist_sq,se_dist_sq,alpha_t,aiming_min,sigma_t"]
    sigma = curve.sigma_column()
    for i in range(curve.t.shape[0]):
        lines.append(
            ",".join(
                [
                    str(int(curve.t[i])),
                    _fmt(curve.mean_dist_sq[i]),
                    _fmt(curve.se_dist_sq[i]),
                    _fmt(curve.alpha[i]),
                    _fmt(curve.aiming_min[i]),
                    _fmt(sigma[i]),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_outputs(out_dir: str, cfg: ExperimentConfig, named_texts: dict[str, str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, text in named_texts.items():
        _write(os.path.join(out_dir, name), text)
    manifest = [
        f"config_sha256 = {_sha256(config_text(cfg).encode())}",
        f"base_seed = {cfg.base_seed}",
    ]
    for name in sorted(named_texts):
        data = named_texts[name].encode()
        manifest.append(f"file {name} sha256={_sha256(data)} bytes={len(data)}")
    _write(os.path.join(out_dir, "manifest.txt"), "\n".join(manifest) + "\n")


# ---------------------------------------------------------------------------
# run


def _run_one_seed(args):
    problem, opt, schedule, T, base_seed, index, x0 = args
    records = analysis.run_trajectory(
        problem, opt, schedule, T, base_seed, seed_index=index, x0=x0
    )
    dist = np.array([r.dist_sq for r in records])
    loss = np.array([r.loss for r in records])
    aim = np.array(
        [np.nan if r.aiming_value is None else r.aiming_value for r in records]
    )
    return dist, loss, aim


def _parallel_mean_curve(problem, opt, schedule, T, n_seeds, base_seed, x0,
                         workers: int) -> MeanCurve:
    """Seed-parallel ensemble with a deterministic seed-index reduction; the
    arithmetic mirrors analysis.mean_trajectory exactly, so the output bytes
    do not depend on the worker count."""
    jobs = [(problem, opt, schedule, T, base_seed, i, x0) for i in range(n_seeds)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_run_one_seed, jobs))
    ref, loss_sum, aim_min = results[0]
    ref = ref.copy()
    loss_sum = loss_sum.copy()
    d_sum = np.zeros_like(ref)
    d_sq = np.zeros_like(ref)
    for dist, loss, aim in results[1:]:
        delta = dist - ref
        d_sum += delta
        d_sq += delta * delta
        loss_sum += loss
        aim_min = np.fmin(aim_min, aim)
    mean = ref + d_sum / n_seeds
    var = np.maximum((d_sq - d_sum**2 / n_seeds) / (n_seeds - 1), 0.0)
    alphas = np.array([schedules.value_at(schedule, t) for t in range(T + 1)])
    return MeanCurve(
        t=np.arange(T + 1),
        mean_dist_sq=mean,
        se_dist_sq=np.sqrt(var / n_seeds),
        mean_loss=loss_sum / n_seeds,
        alpha=alphas,
        aiming_min=aim_min,
        n_seeds=n_seeds,
    )


def cmd_run(cfg: ExperimentConfig, out_dir: str | None = None, parallel: int = 1) -> int:
    problem = build_problem(cfg)
    opt = build_optimizer(cfg)
    schedule = build_schedule(cfg)
    _check_schedule_safety(cfg, schedule)
    x0 = _x0(cfg, problem)
    out = out_dir or cfg.output_dir
    # the vectorized ensemble path is already parallel-free, and diagnostic
    # sampling runs along the first seed only; worker fan-out is engaged just
    # where the plain per-seed loop would run, so output bytes stay a pure
    # function of (config, base_seed) regardless of --parallel
    fan_out = (
        parallel > 1
        and cfg.sigma_every == 0
        and not analysis.uses_vectorized_ensemble(problem, opt)
    )
    try:
        if fan_out:
            curve = _parallel_mean_curve(
                problem, opt, schedule, cfg.steps, cfg.n_seeds, cfg.base_seed, x0, parallel
            )
        else:
            curve = analysis.mean_trajectory(
                problem, opt, schedule, cfg.steps, cfg.n_seeds, cfg.base_seed,
                x0=x0, sigma_every=cfg.sigma_every,
            )
    except DivergenceError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1
    write_outputs(out, cfg, {"trajectory.csv": curve_csv(curve)})
    print(f"wrote {out}/trajectory.csv ({cfg.steps + 1} rows) and manifest.txt")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _set_config_key(cfg: ExperimentConfig, key: str, value: float) -> ExperimentConfig:
    if key not in KEY_TABLE:
        raise ConfigError("sweep.param", f"unknown config key {key!r}")
    attr, parser, _ = KEY_TABLE[key]
    current = getattr(cfg, attr)
    if isinstance(current, bool) or isinstance(current, (str, tuple)):
        raise ConfigError("sweep.param", f"{key!r} is not a numeric scalar key")
    cast = int(value) if isinstance(current, int) else float(value)
    return replace(cfg, **{attr: cast})


def cmd_sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> int:
    if not cfg.sweep_param or not cfg.sweep_values:
        raise ConfigError("sweep.param", "sweep needs sweep.param and sweep.values")
    grid2 = list(cfg.sweep_values2) if cfg.sweep_param2 else [None]
    out = out_dir or cfg.output_dir
    header = [cfg.sweep_param]
    if cfg.sweep_param2:
        header.append(cfg.sweep_param2)
    header += ["final_dist_sq", "final_loss", "slope", "diverged"]
    rows = [",".join(header)]
    for v1 in cfg.sweep_values:
        for v2 in grid2:
            point = _set_config_key(cfg, cfg.sweep_param, v1)
            if v2 is not None:
                point = _set_config_key(point, cfg.sweep_param2, v2)
            problem = build_problem(point)
            opt = build_optimizer(point)
            schedule = build_schedule(point)
            _check_schedule_safety(point, schedule)
            diverged = False
            try:
                curve = analysis.mean_trajectory(
                    problem, opt, schedule, point.steps, point.n_seeds,
                    point.base_seed, x0=_x0(point, problem),
                )
                final_d = float(curve.mean_dist_sq[-1])
                final_l = float(curve.mean_loss[-1])
                try:
                    fit = analysis.fit_rate(curve, (max(1, point.steps // 100), point.steps))
                    slope = fit.slope
                except analysis.AnalysisError:
                    slope = float("nan")
            except DivergenceError:
                diverged = True
                final_d = float("inf")
                final_l = float("inf")
                slope = float("nan")
            cells = [_fmt(v1)]
            if v2 is not None:
                cells.append(_fmt(v2))
            cells += [_fmt(final_d), _fmt(final_l), _fmt(slope), str(int(diverged))]
            rows.append(",".join(cells))
    write_outputs(out, cfg, {"sweep.csv": "\n".join(rows) + "\n"})
    print(f"wrote {out}/sweep.csv ({len(rows) - 1} grid points)")
    return 0


# ---------------------------------------------------------------------------
# verify


def _gaussian_square_variance(mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    """Var(X^2) for X ~ N(mu, sd^2): 4 mu^2 sd^2 + 2 sd^4."""
    return 4.0 * mu**2 * sd**2 + 2.0 * sd**4


def _estimator_fixture_checks(cfg: ExperimentConfig) -> list[CheckResult]:
    """Monte Carlo estimator statistics against the closed-form Gaussian
    references, on a frozen quadratic state. Each line reports the largest
    per-coordinate deviation in standard errors (bound: 3 SE)."""
    h = np.array([1.0, 2.0, 0.5])
    sigma = np.array([0.5, 1.0, 1.5])
    problem = NoisyQuadratic(h=h, sigma=sigma, x_star=np.zeros(3))
    x = np.array([1.2, -0.7, 2.0])
    m_prev = np.array([0.5, -1.0, 0.25])
    v_prev = np.array([1.0, 1.5, 2.0])
    mu_g = h * x
    sd_g = h * sigma
    n_mc = 10**5
    beta1, beta2 = 0.9, 0.95
    nc = cfg.negative_control_beta
    exp_beta1 = beta1 if nc is None else nc
    exp_beta2 = beta2 if nc is None else nc
    state_mv = OptimizerState(t=1, initialized=True, m=m_prev, v=v_prev)
    state_m = OptimizerState(t=1, initialized=True, m=m_prev, v=None)
    checks = []

    def max_dev(observed, expected, se):
        se = np.where(se > 0, se, 1e-300)
        return float(np.max(np.abs(observed - expected) / se))

    # EMA of the squared momentum
    opt = OptimizerConfig("bcos_m", beta1=beta1, beta2=beta2, epsilon=1e-6)
    stats = analysis.estimator_stats(problem, x, state_mv, opt, n_mc, seed=101)
    mu_m = beta1 * m_prev + (1 - beta1) * mu_g
    sd_m = (1 - beta1) * sd_g
    expected = (1 - exp_beta2) ** 2 * _gaussian_square_variance(mu_m, sd_m)
    rng = problems.make_rng(101, problems.MC_STREAM)
    G = problem.sample_gradients(x, rng, n_mc)
    m_draws = beta1 * m_prev + (1 - beta1) * G
    v_draws = beta2 * v_prev + (1 - beta2) * m_draws**2
    dev = max_dev(stats.variance, expected, analysis.mc_variance_se(v_draws))
    checks.append(CheckResult("ema_variance_dev_se", dev, 3.0, "max dev <= 3 SE", dev <= 3.0))

    # the squared-gradient EMA paired with a momentum direction
    opt = OptimizerConfig("adam", beta1=beta1, beta2=beta2, epsilon=1e-6)
    stats = analysis.estimator_stats(problem, x, state_mv, opt, n_mc, seed=102)
    expected = (1 - exp_beta2) ** 2 * _gaussian_square_variance(mu_g, sd_g)
    rng = problems.make_rng(102, problems.MC_STREAM)
    G = problem.sample_gradients(x, rng, n_mc)
    v_draws = beta2 * v_prev + (1 - beta2) * G**2
    dev = max_dev(stats.variance, expected, analysis.mc_variance_se(v_draws))
    checks.append(CheckResult("adam_variance_dev_se", dev, 3.0, "max dev <= 3 SE", dev <= 3.0))

    # conditional estimator: variance and signed bias
    opt = OptimizerConfig("bcos_c", beta1=beta1, epsilon=1e-6)
    stats = analysis.estimator_stats(problem, x, state_m, opt, n_mc, seed=103)
    expected = (1 - exp_beta1) ** 4 * _gaussian_square_variance(mu_g, sd_g)
    rng = problems.make_rng(103, problems.MC_STREAM)
    G = problem.sample_gradients(x, rng, n_mc)
    v_draws = (1 - (1 - beta1) ** 2) * m_prev**2 + (1 - beta1) ** 2 * G**2
    dev = max_dev(stats.variance, expected, analysis.mc_variance_se(v_draws))
    checks.append(CheckResult("conditional_variance_dev_se", dev, 3.0, "max dev <= 3 SE", dev <= 3.0))
    bias_expected = 2 * exp_beta1 * (1 - exp_beta1) * m_prev * (m_prev - mu_g)
    signed = stats.mean_v - stats.exact_second_moment
    dev = max_dev(signed, bias_expected, analysis.mc_mean_se(v_draws))
    checks.append(CheckResult("conditional_bias_dev_se", dev, 3.0, "max dev <= 3 SE", dev <= 3.0))

    # sign mode: v = d^2 is unbiased
    opt = OptimizerConfig("sign_sgd", beta1=0.0, epsilon=0.0)
    stats = analysis.estimator_stats(problem, x, init_state(), opt, n_mc, epsilon=0.0, seed=104)
    rng = problems.make_rng(104, problems.MC_STREAM)
    G = problem.sample_gradients(x, rng, n_mc)
    dev = max_dev(stats.mean_v, stats.exact_second_moment, analysis.mc_mean_se(G**2))
    checks.append(CheckResult("sign_bias_dev_se", dev, 3.0, "max dev <= 3 SE", dev <= 3.0))

    # constant estimator: exactly zero variance
    opt = OptimizerConfig("sgd", beta1=0.0, epsilon=0.0)
    stats = analysis.estimator_stats(problem, x, init_state(), opt, n_mc, epsilon=0.0, seed=105)
    obs = float(np.max(stats.variance))
    checks.append(CheckResult("constant_variance_zero", obs, 0.0, "exact", obs == 0.0))
    return checks


def _counterexample_checks() -> tuple[list[CheckResult], list[CheckResult]]:
    log_report = problems.counterexample_log_aiming()
    min_inner = min(r.inner_product for r in log_report.rows)
    max_curv = max(r.curvature_witness for r in log_report.rows)
    log_checks = [
        CheckResult("log_aiming_min_inner", min_inner, 0.0, "observed >= 0",
                    log_report.aiming_all_pass),
        CheckResult("log_concavity_max_second_derivative", max_curv, 0.0,
                    "observed < 0", log_report.convexity_all_fail),
    ]
    quad = problems.counterexample_quadratic_not_aiming()
    eig_err = float(np.max(np.abs(quad["eigenvalues"] - np.array([0.0, 5.0]))))
    quad_checks = [
        CheckResult("quadratic_aiming_value", quad["aiming_value"], -0.5,
                    "exact equality", quad["aiming_value"] == -0.5),
        CheckResult("quadratic_eigenvalues_dev", eig_err, 1e-12,
                    "abs dev <= 1e-12", eig_err <= 1e-12),
        CheckResult("quadratic_psd", float(quad["psd_certified"]), 1.0, "certified",
                    quad["psd_certified"]),
    ]
    return log_checks, quad_checks


def cmd_verify(cfg: ExperimentConfig) -> int:
    sections: list[tuple[str, list[CheckResult]]] = []
    if cfg.verify_counterexamples:
        log_checks, quad_checks = _counterexample_checks()
        sections.append(("counterexample_log_aiming", log_checks))
        sections.append(("counterexample_quadratic_not_aiming", quad_checks))
    if cfg.verify_chung:
        sections.append(("chung_recursions", list(analysis.verify_chung_recursions().checks)))
    if cfg.verify_ratio_expansion:
        report = analysis.verify_ratio_expansion()
        sections.append(("ratio_expansion", list(report.checks)))
    if cfg.verify_estimator_stats:
        sections.append(("estimator_catalog", _estimator_fixture_checks(cfg)))
    all_pass = True
    print("name,observed,bound,tolerance,status")
    for name, checks in sections:
        print(f"# {name}")
        for check in checks:
            print(check.format_line())
            all_pass &= check.passed
    return 0 if all_pass else 1


def cmd_counterexamples(cfg: ExperimentConfig, out_dir: str | None = None) -> int:
    log_report = problems.counterexample_log_aiming()
    quad = problems.counterexample_quadratic_not_aiming()
    print(log_report.render_text())
    print(problems.render_quadratic_report(quad))
    if out_dir:
        write_outputs(out_dir, cfg, {"counterexample_log.csv": "\n".join(log_report.csv_rows()) + "\n"})
    log_ok = log_report.aiming_all_pass and log_report.convexity_all_fail
    quad_ok = quad["aiming_violated"] and quad["psd_certified"]
    return 0 if (log_ok and quad_ok) else 1


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bcoslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "verify", "counterexamples"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "counterexamples"), help="config file path")
        p.add_argument("--seeds", type=int, default=None, help="override run.n_seeds")
        p.add_argument("--out", default=None, help="override run.output_dir")
        p.add_argument("--parallel", type=int, default=1, help="seed-parallel workers")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seeds is not None:
            cfg = replace(cfg, n_seeds=args.seeds)
        out_dir = args.out or os.environ.get("OUTPUT_DIR") or None
        if args.command == "run":
            return cmd_run(cfg, out_dir, parallel=args.parallel)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir)
        if args.command == "verify":
            return cmd_verify(cfg)
        return cmd_counterexamples(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
