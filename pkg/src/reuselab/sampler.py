"""Blockwise masked-diffusion generation and the coupled paired sampler.

``diffusion_generate`` is the practical decode loop: all positions of a
block start masked, every denoising step samples candidates for the still
masked positions, and the highest-confidence candidates are committed
(unmasked) until the block is fully resolved.

``coupled_generate`` is the measurement loop: it evolves a reuse branch and
a reuse-free reference branch in lockstep, resampling every position each
step through a maximal coupling so the two token strings agree wherever
the two distributions overlap. The recorded per-step gaps are what the
bound harness checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .model import ModelWeights, embed_tokens, forward_full
from .reuse import ReuseState, model_step

_DIST_ATOL = 1e-9


@dataclass(frozen=True)
class SamplerConfig:
    """Decode-loop knobs; block_size must match the model's B."""

    gen_length: int = 4
    block_size: int = 4
    steps_per_block: int = 4
    tokens_unmasked_per_step: int = 1
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.gen_length, self.block_size, self.steps_per_block,
               self.tokens_unmasked_per_step) < 1:
            raise ConfigError("all sampler counts must be >= 1")
        if self.temperature < 0.0:
            raise ConfigError("temperature must be >= 0")
        if self.gen_length % self.block_size != 0:
            raise ConfigError("gen_length must be a multiple of block_size")
        if self.tokens_unmasked_per_step * self.steps_per_block \
                < self.block_size:
            raise ConfigError(
                "schedule cannot resolve the block: "
                "tokens_unmasked_per_step * steps_per_block < block_size")


@dataclass
class StepRecord:
    """Everything observed during one denoising step of one block."""

    block: int
    step: int
    input_tokens: np.ndarray          # block tokens fed to the model
    decisions: list                   # per-layer ReuseDecision
    q_head0: list                     # per-layer B x d_head query matrices
    unmasked: np.ndarray              # positions committed this step
    confidences: np.ndarray           # candidate confidence per position
    staleness_l2: float


@dataclass
class GenerationTrace:
    """Per-step record stream of one generation run."""

    mode: str
    block_size: int
    records: list = field(default_factory=list)
    final_tokens: np.ndarray | None = None

    def decisions_flat(self):
        return [d for rec in self.records for d in rec.decisions]

    def q_trajectories(self):
        """Per block, the per-step per-layer head-0 query matrices."""
        blocks = {}
        for rec in self.records:
            blocks.setdefault(rec.block, []).append(rec.q_head0)
        return [blocks[b] for b in sorted(blocks)]

    def jsonl_records(self):
        """Decision and unmask events as JSON-ready dicts, step ordered."""
        for rec in self.records:
            for dec in rec.decisions:
                row = dec.to_record()
                row["block"] = rec.block
                row["eligible"] = dec.eligible
                yield row
            yield {
                "block": rec.block,
                "step": rec.step,
                "event": "unmask",
                "positions": [int(i) for i in rec.unmasked],
            }


def _check_distribution(p: np.ndarray) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError("distribution must be a non-empty vector")
    if np.any(a < 0.0) or abs(float(a.sum()) - 1.0) > _DIST_ATOL:
        raise DegenerateInputError(
            "input is not a normalized probability vector")
    return a


def _draw_index(weights: np.ndarray, rng) -> int:
    """Inverse-CDF draw from nonnegative weights summing to ~1."""
    cdf = np.cumsum(weights)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, weights.size - 1)


def maximal_coupling_sample(p, q, rng):
    """Draw (j, jhat) with marginals exactly p and q and maximal agreement.

    The overlap mass sum(min(p, q)) = 1 - TV(p, q) is placed on the
    diagonal; with the remaining probability the two indices are drawn
    independently from the normalized residuals. Bitwise-equal inputs take
    a fast path that always agrees.
    """
    pa = _check_distribution(p)
    qa = _check_distribution(q)
    if pa.size != qa.size:
        raise DimensionError("p and q must share a support")
    if np.array_equal(pa, qa):
        j = _draw_index(pa, rng)
        return j, j
    overlap = np.minimum(pa, qa)
    alpha = float(overlap.sum())
    if rng.random() < alpha:
        j = _draw_index(overlap / alpha, rng)
        return j, j
    res_p = pa - overlap
    res_q = qa - overlap
    j = _draw_index(res_p / res_p.sum(), rng)
    jhat = _draw_index(res_q / res_q.sum(), rng)
    return j, jhat


def _sample_candidate(p: np.ndarray, temperature: float, rng):
    """Sample one token; returns (token, confidence = model prob of it).

    temperature 0 is greedy (no randomness consumed); otherwise the
    distribution is reshaped as p^(1/temperature) in log space.
    """
    if temperature == 0.0:
        j = int(np.argmax(p))
        return j, float(p[j])
    with np.errstate(divide="ignore"):
        z = np.log(p) / temperature
    z -= z.max()
    w = np.exp(z)
    j = _draw_index(w / w.sum(), rng)
    return j, float(p[j])


def _resolve_taus(drift_profile, L: int, mode: str):
    if mode == "full" or drift_profile is None:
        if mode != "full" and drift_profile is None:
            raise ConfigError(f"mode {mode!r} needs a drift profile")
        return (None,) * L
    if drift_profile.L != L:
        raise DimensionError(
            f"profile has {drift_profile.L} layers, model has {L}")
    return tuple(drift_profile.tau_layer)


def diffusion_generate(weights: ModelWeights, config: SamplerConfig,
                       drift_profile, mode: str, *,
                       skip_first_layers: int = 0,
                       refresh_interval: int = 2,
                       initial_tokens=None):
    """Blockwise confidence-top-k masked-diffusion decoding.

    Non-mask entries of ``initial_tokens`` act as a frozen prompt; masked
    entries are denoised. Each block stops early once fully unmasked, so
    the effective step count can be below steps_per_block.

    Returns:
        (tokens, trace): the resolved token sequence and the step records.
    """
    cfg = weights.config
    if config.block_size != cfg.B:
        raise ConfigError(
            f"block_size {config.block_size} != model block length {cfg.B}")
    tau_layer = _resolve_taus(drift_profile, cfg.L, mode)
    state = ReuseState(config=cfg, mode=mode, tau_layer=tau_layer,
                       skip_first_layers=skip_first_layers,
                       refresh_interval=refresh_interval)
    rng = np.random.default_rng(config.seed)
    tokens = np.full(config.gen_length, weights.mask_token, dtype=np.int64)
    if initial_tokens is not None:
        given = np.asarray(initial_tokens, dtype=np.int64)
        if given.shape != tokens.shape:
            raise DimensionError(
                f"initial_tokens must have length {config.gen_length}")
        if given.min() < 0 or given.max() >= cfg.n_vocab:
            raise DegenerateInputError("initial token out of range")
        tokens = given.copy()
    trace = GenerationTrace(mode=mode, block_size=cfg.B)

    for b in range(config.gen_length // cfg.B):
        state.reset_block()
        lo = b * cfg.B
        block = tokens[lo:lo + cfg.B]
        masked = block == weights.mask_token
        for t in range(config.steps_per_block):
            if not masked.any():
                break
            x = embed_tokens(weights, block)
            probs, decisions, q_head0 = model_step(weights, state, x, t)
            cand = np.full(cfg.B, -1, dtype=np.int64)
            conf = np.full(cfg.B, -np.inf)
            for i in np.flatnonzero(masked):
                cand[i], conf[i] = _sample_candidate(
                    probs[i], config.temperature, rng)
            m_idx = np.flatnonzero(masked)
            order = m_idx[np.argsort(-conf[m_idx], kind="stable")]
            chosen = order[:config.tokens_unmasked_per_step]
            input_copy = block.copy()
            block[chosen] = cand[chosen]
            masked[chosen] = False
            trace.records.append(StepRecord(
                block=b, step=t, input_tokens=input_copy,
                decisions=decisions, q_head0=q_head0,
                unmasked=chosen.copy(), confidences=conf.copy(),
                staleness_l2=state.staleness_l2()))
    trace.final_tokens = tokens.copy()
    return tokens, trace


@dataclass
class CoupledPair:
    """Lockstep full/reuse run measurements over one block of T steps.

    Index conventions: per_step_embed_error[t] compares the two branches'
    input embeddings at step t (entry 0 is the shared all-mask start,
    entry T the final strings); the other arrays are indexed by the step
    that produced them (0..T-1), with staleness taken after the step's
    reuse decisions.
    """

    full_tokens: np.ndarray
    reuse_tokens: np.ndarray
    per_step_embed_error: np.ndarray   # length T + 1
    per_step_l1_gap: np.ndarray        # length T
    per_step_delta_l2: np.ndarray      # length T
    per_step_delta: list               # length T, each an L x B int matrix
    decisions: list                    # flat ReuseDecision list


def coupled_generate(weights: ModelWeights, config: SamplerConfig,
                     drift_profile, mode: str, *,
                     skip_first_layers: int = 0,
                     refresh_interval: int = 2) -> CoupledPair:
    """Run the reference and reuse branches coupled step by step.

    Both branches start from the all-mask block and resample every position
    at every step; each position's token pair is drawn from the maximal
    coupling of the reference branch's distribution (at its own input) and
    the reuse branch's distribution. The recorded L1 gap compares the two
    models at the reuse branch's input, which is the quantity the per-step
    bounds constrain.
    """
    cfg = weights.config
    if mode not in ("kv", "o"):
        raise ConfigError("coupled runs need mode 'kv' or 'o'")
    if config.gen_length != cfg.B or config.block_size != cfg.B:
        raise ConfigError("coupled runs cover exactly one block")
    tau_layer = _resolve_taus(drift_profile, cfg.L, mode)
    state = ReuseState(config=cfg, mode=mode, tau_layer=tau_layer,
                       skip_first_layers=skip_first_layers,
                       refresh_interval=refresh_interval)
    rng = np.random.default_rng(config.seed)
    T = config.steps_per_block
    B = cfg.B
    x_tokens = np.full(B, weights.mask_token, dtype=np.int64)
    xhat_tokens = x_tokens.copy()

    embed_err = np.zeros(T + 1)
    l1_gap = np.zeros(T)
    delta_l2 = np.zeros(T)
    deltas = []
    decisions_flat = []

    for t in range(T):
        x_hat = embed_tokens(weights, xhat_tokens)
        p_hat, decisions, _ = model_step(weights, state, x_hat, t)
        if np.array_equal(x_tokens, xhat_tokens):
            # Shared input: the reference distribution at the reuse
            # branch's input is exactly the full forward below.
            p_full, _ = forward_full(weights, x_hat)
            p_ref = p_full
        else:
            p_full, _ = forward_full(weights, embed_tokens(weights, x_tokens))
            p_ref, _ = forward_full(weights, x_hat)
        l1_gap[t] = float(np.abs(p_ref - p_hat).sum())
        delta_l2[t] = state.staleness_l2()
        deltas.append(state.delta.copy())
        decisions_flat.extend(decisions)
        for i in range(B):
            j, jhat = maximal_coupling_sample(p_full[i], p_hat[i], rng)
            x_tokens[i] = j
            xhat_tokens[i] = jhat
        if np.array_equal(x_tokens, xhat_tokens):
            embed_err[t + 1] = 0.0
        else:
            diff = embed_tokens(weights, x_tokens) \
                - embed_tokens(weights, xhat_tokens)
            embed_err[t + 1] = float(np.linalg.norm(diff, axis=1).sum())
    return CoupledPair(
        full_tokens=x_tokens,
        reuse_tokens=xhat_tokens,
        per_step_embed_error=embed_err,
        per_step_l1_gap=l1_gap,
        per_step_delta_l2=delta_l2,
        per_step_delta=deltas,
        decisions=decisions_flat,
    )
