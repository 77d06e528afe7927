"""Closed-form error bounds for activation reuse, plus an empirical checker.

The bounds cover the single-layer, single-head regime. ``lipschitz_G`` bounds
how much one denoising step can amplify an input perturbation;
``kv_step_bound`` and ``o_step_bound`` bound the L1 gap a single reuse step
can open between the exact and the reusing model at the same input; and
``cumulative_bound`` chains the two through the recursion
``e_{t+1} = G * e_t + b_t``. ``verify_run`` replays coupled generation runs
and counts how often any measured error exceeds its bound (the expected
count is zero; a violation means an implementation bug, not a tight run).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, RegimeError
from .linalg import (
    condition_kappa,
    frobenius_norm,
    norm_2_to_1_upper,
    norm_2_to_inf,
    softmax_rows,
    spectral_norm,
)
from .model import G_SIGMA, ModelConfig, ModelWeights
from .sampler import SamplerConfig, coupled_generate

# Logit pairs drawn for the softmax contraction spot-check in verify_run.
SOFTMAX_CHECK_PAIRS = 128
# Additive slack for the softmax contraction check (pure float noise).
SOFTMAX_CHECK_SLACK = 1e-9


def _theory_config(weights: ModelWeights, config: ModelConfig | None) -> ModelConfig:
    cfg = weights.config if config is None else config
    if cfg.L != 1 or cfg.H != 1:
        raise RegimeError(
            f"closed-form bounds cover L=1, H=1 models only, got L={cfg.L}, H={cfg.H}"
        )
    return cfg


def lipschitz_G(weights: ModelWeights, config: ModelConfig | None = None) -> float:
    """One-step amplification constant of the denoising map.

    Product of operator norms of the weight stack, times the batch size,
    times an attention-sensitivity factor driven by the query/key norms and
    the largest raw embedding row norm. The 2->1 norm of the embedding is
    replaced by its sum-of-row-norms upper bound, which inflates G but keeps
    the bound direction.
    """
    cfg = _theory_config(weights, config)
    lw = weights.layers[0]
    r = weights.r_emb
    stack = (
        norm_2_to_1_upper(weights.emb)
        * spectral_norm(lw.w_d)
        * G_SIGMA[cfg.activation]
        * spectral_norm(lw.w_u)
        * spectral_norm(lw.w_o)
        * spectral_norm(lw.w_v)
    )
    attention_gain = cfg.B * (
        2.0 * r * r * spectral_norm(lw.w_q) * spectral_norm(lw.w_k) / math.sqrt(cfg.d)
        + 1.0
    )
    return stack * attention_gain


def tau_tilde(tau: float, d: int, kappa_q: float) -> float:
    """Worst-case squared input half-displacement implied by a query-cosine
    acceptance at threshold tau, for inputs of norm sqrt(d) and a query map
    of condition number kappa_q.

    A token accepted for reuse moved by at most ``sqrt(2 * tau_tilde)``
    between consecutive steps.
    """
    if tau < 0.0:
        raise DegenerateInputError(f"tau must be >= 0, got {tau}")
    if kappa_q < 1.0:
        raise DegenerateInputError(f"kappa_q must be >= 1, got {kappa_q}")
    if d < 1:
        raise DegenerateInputError(f"d must be >= 1, got {d}")
    return 2.0 * tau * d * kappa_q ** 2 / (2.0 + tau * (kappa_q ** 2 - 1.0))


def kv_step_constant(weights: ModelWeights, config: ModelConfig | None = None) -> float:
    """The constant C_W with the sqrt(2) and batch factors folded in, so the
    per-step key/value reuse bound is ``C_W * sqrt(tau_tilde) * ||Delta||_2``.
    """
    cfg = _theory_config(weights, config)
    lw = weights.layers[0]
    sv = spectral_norm(lw.w_v)
    prefactor = (
        norm_2_to_inf(weights.emb)
        * spectral_norm(lw.w_d)
        * G_SIGMA[cfg.activation]
        * spectral_norm(lw.w_u)
        * spectral_norm(lw.w_o)
        * (sv + sv * spectral_norm(lw.w_q) / math.sqrt(cfg.d))
    )
    return math.sqrt(2.0) * cfg.B * prefactor


def kv_step_bound(
    weights: ModelWeights,
    config: ModelConfig | None,
    tau: float | None,
    delta_l2: float,
) -> float:
    """Bound on the summed per-token L1 output gap opened by one step of
    key/value reuse with staleness vector of Euclidean norm ``delta_l2``.
    """
    cfg = _theory_config(weights, config)
    if tau is None or tau == 0.0 or delta_l2 == 0.0:
        return 0.0
    if delta_l2 < 0.0:
        raise DegenerateInputError(f"delta_l2 must be >= 0, got {delta_l2}")
    kappa = condition_kappa(weights.layers[0].w_q)
    tt = tau_tilde(tau, cfg.d, kappa)
    return kv_step_constant(weights, cfg) * math.sqrt(tt) * float(delta_l2)


def o_step_terms(
    weights: ModelWeights,
    displacement: float,
    delta,
) -> float:
    """Sum over stale tokens of the three attention-output deviation terms
    (query moved, keys moved, values moved), given a bound ``displacement``
    on how far any accepted token's input row moves in one step.

    Each stale token's total input movement is its staleness count times
    ``displacement``; the keys/values terms spread that movement across the
    whole block, hence the extra sqrt(B) factors.
    """
    cfg = _theory_config(weights, None)
    lw = weights.layers[0]
    if displacement < 0.0:
        raise DegenerateInputError(f"displacement must be >= 0, got {displacement}")
    delta = np.asarray(delta)
    if delta.shape != (cfg.B,):
        raise DegenerateInputError(
            f"delta must have one entry per block token ({cfg.B}), got {delta.shape}"
        )
    f_o = frobenius_norm(lw.w_o)
    f_v = frobenius_norm(lw.w_v)
    f_k = frobenius_norm(lw.w_k)
    f_q = frobenius_norm(lw.w_q)
    four = f_o * f_v * f_k * f_q
    b = cfg.B
    d = cfg.d
    total = 0.0
    for delta_i in delta:
        if delta_i == 0:
            continue
        move = float(delta_i) * displacement
        query_term = b * math.sqrt(d) * four * move
        keys_term = math.sqrt(b * d) * four * math.sqrt(b) * move
        values_term = f_o * f_v * math.sqrt(b) * move
        total += query_term + keys_term + values_term
    return total


def o_step_bound(
    weights: ModelWeights,
    config: ModelConfig | None,
    tau: float | None,
    delta,
) -> float:
    """Bound on the summed per-token L1 output gap opened by one step of
    attention-output reuse with per-token staleness counts ``delta``.
    """
    cfg = _theory_config(weights, config)
    delta = np.asarray(delta)
    if tau is None or tau == 0.0 or not np.any(delta > 0):
        return 0.0
    lw = weights.layers[0]
    kappa = condition_kappa(lw.w_q)
    tt = tau_tilde(tau, cfg.d, kappa)
    scale = (
        norm_2_to_inf(weights.emb)
        * spectral_norm(lw.w_d)
        * G_SIGMA[cfg.activation]
        * spectral_norm(lw.w_u)
    )
    return scale * o_step_terms(weights, math.sqrt(2.0 * tt), delta)


def cumulative_series(G: float, per_step_bounds) -> np.ndarray:
    """Error-recursion series e_0 = 0, e_{t+1} = G * e_t + b_t.

    Entry t bounds the summed embedding-row gap between the exact and the
    reusing branch at the input of step t.
    """
    if G < 0.0:
        raise DegenerateInputError(f"G must be >= 0, got {G}")
    series = np.zeros(len(per_step_bounds) + 1)
    for t, b in enumerate(per_step_bounds):
        b = float(b)
        if b < 0.0:
            raise DegenerateInputError(f"per-step bounds must be >= 0, got {b}")
        series[t + 1] = G * series[t] + b
    return series


def cumulative_bound(G: float, per_step_bounds) -> float:
    """Final entry of the error recursion over the given per-step bounds."""
    return float(cumulative_series(G, per_step_bounds)[-1])


def softmax_lipschitz_gap(z, z_prime) -> tuple[float, float]:
    """Return (L1 gap of the softmaxes, Linf gap of the logits).

    The contraction property says the first never exceeds the second.
    """
    z = np.asarray(z, dtype=np.float64)
    z_prime = np.asarray(z_prime, dtype=np.float64)
    if z.ndim != 1 or z.shape != z_prime.shape or z.size == 0:
        raise DegenerateInputError(
            f"need two equal-length logit vectors, got {z.shape} and {z_prime.shape}"
        )
    p = softmax_rows(z[None, :])[0]
    p_prime = softmax_rows(z_prime[None, :])[0]
    l1 = float(np.abs(p - p_prime).sum())
    linf = float(np.abs(z - z_prime).max())
    return l1, linf


@dataclass(frozen=True)
class TheoryReport:
    """Constants, per-step bound/measurement series (trial means), the
    cumulative recursion, and the violation count from one verify_run.

    ``per_step_*`` are indexed by producing step (length T);
    ``cumulative_*_series`` by the step whose input they describe
    (length T + 1, entry 0 is the shared start). violations counts every
    (trial, step) per-step exceedance, every cumulative-series exceedance,
    and every failed softmax contraction spot-check.
    """

    G: float
    kappa_q: float
    tau_tilde: float
    C_W: float
    mode: str
    tau: float | None
    trials: int
    per_step_bound: tuple
    per_step_empirical: tuple
    cumulative_bound_series: tuple
    cumulative_empirical_series: tuple
    cumulative_bound: float
    cumulative_empirical: float
    violations: int

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        for key, value in payload.items():
            if isinstance(value, tuple):
                payload[key] = list(value)
        return json.dumps(payload, sort_keys=True)

    def per_step_rows(self):
        """Rows (step, bound, empirical, cumulative bound, cumulative
        empirical) for CSV emission; the cumulative columns describe the
        input of the named step."""
        for t in range(len(self.per_step_bound)):
            yield {
                "step": t,
                "step_bound": self.per_step_bound[t],
                "step_empirical": self.per_step_empirical[t],
                "cumulative_bound": self.cumulative_bound_series[t],
                "cumulative_empirical": self.cumulative_empirical_series[t],
            }


def verify_run(
    weights: ModelWeights,
    run_config: SamplerConfig,
    drift_profile,
    mode: str,
    trials: int,
    *,
    skip_first_layers: int = 0,
    refresh_interval: int = 2,
    debug_zero_bounds: bool = False,
) -> TheoryReport:
    """Run coupled generation ``trials`` times and check every bound.

    Three checks feed the violation count: (a) each trial's per-step L1 gap
    against the per-step bound at that trial's staleness, (b) the
    trial-averaged embedding gap at every step against the error recursion
    driven by the trial-averaged per-step bounds, (c) softmax contraction on
    random logit pairs. Trials use independent seeds derived from the run
    seed, so the report is reproducible.

    ``debug_zero_bounds`` replaces G and every per-step bound with zero; a
    lossy run must then report violations. It exists to prove the harness
    can fail and has no other use.
    """
    cfg = _theory_config(weights, None)
    if mode not in ("kv", "o"):
        raise ConfigError(f"verify_run covers modes 'kv' and 'o', got {mode!r}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if drift_profile is None or drift_profile.L != cfg.L:
        raise ConfigError("verify_run needs a drift profile matching the model")
    tau = drift_profile.tau_layer[0]

    T = run_config.steps_per_block
    trial_seeds = np.random.SeedSequence(run_config.seed).generate_state(trials)
    bounds = np.zeros((trials, T))
    gaps = np.zeros((trials, T))
    embed_errors = np.zeros((trials, T + 1))
    violations = 0

    for k in range(trials):
        trial_config = dataclasses.replace(run_config, seed=int(trial_seeds[k]))
        pair = coupled_generate(
            weights,
            trial_config,
            drift_profile,
            mode,
            skip_first_layers=skip_first_layers,
            refresh_interval=refresh_interval,
        )
        for t in range(T):
            if mode == "kv":
                b = kv_step_bound(weights, cfg, tau, pair.per_step_delta_l2[t])
            else:
                b = o_step_bound(weights, cfg, tau, pair.per_step_delta[t][0])
            if debug_zero_bounds:
                b = 0.0
            bounds[k, t] = b
            gaps[k, t] = pair.per_step_l1_gap[t]
            if gaps[k, t] > b:
                violations += 1
        embed_errors[k] = pair.per_step_embed_error

    mean_bounds = bounds.mean(axis=0)
    mean_gaps = gaps.mean(axis=0)
    mean_embed = embed_errors.mean(axis=0)
    G = 0.0 if debug_zero_bounds else lipschitz_G(weights, cfg)
    series = cumulative_series(G, mean_bounds)
    for t in range(T + 1):
        if mean_embed[t] > series[t]:
            violations += 1

    check_rng = np.random.default_rng([int(trial_seeds[0]), SOFTMAX_CHECK_PAIRS])
    for _ in range(SOFTMAX_CHECK_PAIRS):
        n = int(check_rng.integers(2, 65))
        scale = 10.0 ** check_rng.uniform(-2.0, 2.0)
        l1, linf = softmax_lipschitz_gap(
            check_rng.normal(0.0, scale, n), check_rng.normal(0.0, scale, n)
        )
        if l1 > linf + SOFTMAX_CHECK_SLACK:
            violations += 1

    kappa = condition_kappa(weights.layers[0].w_q)
    return TheoryReport(
        G=G,
        kappa_q=kappa,
        tau_tilde=tau_tilde(0.0 if tau is None else tau, cfg.d, kappa),
        C_W=kv_step_constant(weights, cfg),
        mode=mode,
        tau=tau,
        trials=trials,
        per_step_bound=tuple(float(b) for b in mean_bounds),
        per_step_empirical=tuple(float(g) for g in mean_gaps),
        cumulative_bound_series=tuple(float(e) for e in series),
        cumulative_empirical_series=tuple(float(e) for e in mean_embed),
        cumulative_bound=float(series[-1]),
        cumulative_empirical=float(mean_embed[-1]),
        violations=violations,
    )
