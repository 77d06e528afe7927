"""Command-line front end for the activation-reuse laboratory.

Subcommands: init-model (write a weight file), calibrate (fit per-layer
reuse thresholds), generate (decode with or without reuse), verify (check
the error bounds empirically), analyze (similarity and drift artifacts),
and bench (sweep the reuse budget). Every command is deterministic given
its configuration: rerunning writes byte-identical primary outputs, and
wall-clock metadata goes to a ``<command>.meta.json`` sidecar instead.

Exit codes: 0 success, 1 verification violations, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    CostModel,
    cross_layer_similarity,
    drift_scores_for_layer,
    flops_for_trace,
    histogram_csv,
    histogram_from_scores,
    similarity_csv,
    temporal_similarity,
    write_csv_with_metadata,
)
from .drift import (
    DriftProfile,
    allocate_quantiles,
    drift_score,
    layerwise_drift,
    quantile_threshold,
)
from .errors import ConfigError
from .linalg import condition_kappa
from .model import ModelConfig, init_weights, load_weights, save_weights
from .model import embed_tokens, forward_full
from .reuse import MODES, reuse_accounting, simulate_reuse_counterfactual
from .sampler import SamplerConfig, coupled_generate, diffusion_generate
from .theory import lipschitz_G, verify_run

CALIBRATION_PROMPTS = 8
PROFILE_FILENAME = "profile.json"
SCORES_FILENAME = "calibration_scores.json"


@dataclass(frozen=True)
class DriftSettings:
    """Budget and temperature for threshold calibration.

    ``tau_override`` bypasses calibration with one flat threshold.
    ``per_head`` is reserved; only head-0 scoring exists, so True is
    rejected.
    """

    phi_bar: float = 0.5
    epsilon: float = 1.0
    tau_override: float | None = None
    per_head: bool = False

    def __post_init__(self) -> None:
        if self.per_head:
            raise ConfigError(
                "per_head scoring is not implemented; drift is scored on head 0"
            )


@dataclass(frozen=True)
class ReuseSettings:
    """Which activations to reuse and how the gate is configured."""

    mode: str = "full"
    skip_first_layers: int = 0
    refresh_interval: int = 2

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class PathSettings:
    """Where the weight file lives and where outputs are written."""

    weights: str = "model.dare"
    output_dir: str = "runout"


@dataclass(frozen=True)
class RunConfig:
    """Complete configuration of one CLI invocation."""

    model: ModelConfig
    sampler: SamplerConfig
    drift: DriftSettings
    reuse: ReuseSettings
    paths: PathSettings

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(
            model=ModelConfig(L=1, H=1, d=8, d_int=16, n_vocab=32, B=4,
                              activation="relu", seed=1),
            sampler=SamplerConfig(gen_length=8, block_size=4,
                                  steps_per_block=8,
                                  tokens_unmasked_per_step=1,
                                  temperature=1.0, seed=11),
            drift=DriftSettings(),
            reuse=ReuseSettings(),
            paths=PathSettings(),
        )

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        base = cls.default()
        model = (ModelConfig.from_dict(data["model"]) if "model" in data
                 else base.model)
        sampler = (SamplerConfig(**data["sampler"]) if "sampler" in data
                   else base.sampler)
        drift = (DriftSettings(**data["drift"]) if "drift" in data
                 else base.drift)
        reuse = (ReuseSettings(**data["reuse"]) if "reuse" in data
                 else base.reuse)
        paths = (PathSettings(**data["paths"]) if "paths" in data
                 else base.paths)
        return cls(model=model, sampler=sampler, drift=drift, reuse=reuse,
                   paths=paths)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "sampler": dataclasses.asdict(self.sampler),
            "drift": dataclasses.asdict(self.drift),
            "reuse": dataclasses.asdict(self.reuse),
            "paths": dataclasses.asdict(self.paths),
        }


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_sidecar(config: RunConfig, command: str, **extra) -> None:
    payload = {"command": command, "completed_unix": time.time()}
    payload.update(extra)
    path = _output_dir(config) / f"{command}.meta.json"
    path.write_text(json.dumps(payload, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_run_weights(config: RunConfig):
    path = Path(config.paths.weights)
    if not path.exists():
        raise ConfigError(f"weight file {path} not found; run init-model first")
    weights = load_weights(path)
    if weights.config != config.model:
        raise ConfigError(
            f"weight file {path} was built for a different model config"
        )
    return weights


def _resolve_profile(config: RunConfig) -> DriftProfile:
    """The drift profile a reuse run needs: --tau override or profile.json."""
    L = config.model.L
    if config.drift.tau_override is not None:
        return DriftProfile(s_layer=(0.0,) * L, phi_layer=(0.0,) * L,
                            tau_layer=(config.drift.tau_override,) * L,
                            phi_bar=config.drift.phi_bar,
                            epsilon=config.drift.epsilon)
    path = _output_dir(config) / PROFILE_FILENAME
    if not path.exists():
        raise ConfigError(
            f"no {PROFILE_FILENAME} in {path.parent}; run calibrate or pass --tau"
        )
    profile = DriftProfile.from_json(path.read_text(encoding="utf-8"))
    if profile.L != L:
        raise ConfigError(
            f"profile covers {profile.L} layers, model has {L}"
        )
    return profile


# ---------------------------------------------------------------------------
# init-model
# ---------------------------------------------------------------------------

def cmd_init_model(config: RunConfig) -> int:
    weights = init_weights(config.model)
    path = Path(config.paths.weights)
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, path)
    print(f"wrote {path} ({path.stat().st_size} bytes)")
    print(f"kappa_q = {condition_kappa(weights.layers[0].w_q)!r}")
    print(f"R = {weights.r_emb!r}")
    if config.model.L == 1 and config.model.H == 1:
        print(f"G = {lipschitz_G(weights)!r}")
    _write_sidecar(config, "init-model", weights=str(path))
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _calibration_traces(weights, sampler: SamplerConfig,
                        prompts: int = CALIBRATION_PROMPTS):
    """Full-mode generations from seeded random-token prompts.

    Each prompt freezes random tokens over the first half of the sequence
    so calibration sees non-degenerate contexts; the model has no tokenizer,
    so random token strings are the calibration corpus.
    """
    cfg = weights.config
    traces = []
    for k in range(prompts):
        rng = np.random.default_rng([sampler.seed, k])
        prompt = np.full(sampler.gen_length, weights.mask_token,
                         dtype=np.int64)
        prefix = sampler.gen_length // 2
        if prefix:
            prompt[:prefix] = rng.integers(0, cfg.n_vocab - 1, prefix)
        run = dataclasses.replace(sampler, seed=int(rng.integers(2 ** 31)))
        _, trace = diffusion_generate(weights, run, None, "full",
                                      initial_tokens=prompt)
        traces.append(trace)
    return traces


def _pooled_layer_scores(traces, L: int):
    """Per-layer flat drift-score arrays across all traces and blocks."""
    per_layer = []
    for ell in range(L):
        scores = []
        for trace in traces:
            got, _ = drift_scores_for_layer(trace, ell)
            scores.extend(float(s) for s in got)
        per_layer.append(np.asarray(scores))
    return per_layer


def _fit_profile(weights, sampler: SamplerConfig, drift_cfg: DriftSettings,
                 prompts: int = CALIBRATION_PROMPTS):
    """Calibration pipeline: runs, pooled scores, allocation, thresholds."""
    traces = _calibration_traces(weights, sampler, prompts)
    raw = [traj for trace in traces for traj in trace.q_trajectories()]
    s_layer, skipped = layerwise_drift(raw)
    phi = allocate_quantiles(s_layer, drift_cfg.phi_bar, drift_cfg.epsilon)
    layer_scores = _pooled_layer_scores(traces, weights.config.L)
    tau = tuple(quantile_threshold(scores, float(p))
                for scores, p in zip(layer_scores, phi))
    profile = DriftProfile(
        s_layer=tuple(float(s) for s in s_layer),
        phi_layer=tuple(float(p) for p in phi),
        tau_layer=tau,
        phi_bar=drift_cfg.phi_bar,
        epsilon=drift_cfg.epsilon,
        skipped_pairs=skipped,
    )
    return profile, layer_scores


def cmd_calibrate(config: RunConfig, prompts: int = CALIBRATION_PROMPTS) -> int:
    weights = _load_run_weights(config)
    profile, layer_scores = _fit_profile(weights, config.sampler,
                                         config.drift, prompts)
    out = _output_dir(config)
    (out / PROFILE_FILENAME).write_text(profile.to_json() + "\n",
                                        encoding="utf-8")
    scores_payload = {
        "layer_scores": [[float(s) for s in scores] for scores in layer_scores],
        "skipped_pairs": profile.skipped_pairs,
        "prompts": prompts,
    }
    (out / SCORES_FILENAME).write_text(
        json.dumps(scores_payload, sort_keys=True) + "\n", encoding="utf-8")
    for ell in range(profile.L):
        tau = profile.tau_layer[ell]
        print(f"layer {ell}: s = {profile.s_layer[ell]:.6f}, "
              f"phi = {profile.phi_layer[ell]:.6f}, "
              f"tau = {'disabled' if tau is None else repr(tau)}")
    print(f"wrote {out / PROFILE_FILENAME}")
    _write_sidecar(config, "calibrate", prompts=prompts)
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig) -> int:
    weights = _load_run_weights(config)
    mode = config.reuse.mode
    profile = _resolve_profile(config) if mode != "full" else None
    tokens, trace = diffusion_generate(
        weights, config.sampler, profile, mode,
        skip_first_layers=config.reuse.skip_first_layers,
        refresh_interval=config.reuse.refresh_interval,
    )
    out = _output_dir(config)
    (out / "tokens.json").write_text(
        json.dumps([int(t) for t in tokens]) + "\n", encoding="utf-8")
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for record in trace.jsonl_records():
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    accounting = reuse_accounting(trace.decisions_flat(), weights.config.B)
    full, actual, saved = flops_for_trace(trace, config.model, mode)
    summary = {
        "mode": mode,
        "full_flops": full,
        "actual_flops": actual,
        "saved_flop_fraction": saved,
    }
    summary.update(accounting)
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"tokens -> {out / 'tokens.json'}")
    print(f"reuse_fraction = {accounting['reuse_fraction']!r}")
    print(f"saved_flop_fraction = {saved!r}")
    _write_sidecar(config, "generate")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(config: RunConfig, trials: int,
               debug_zero_bounds: bool = False) -> int:
    weights = _load_run_weights(config)
    mode = config.reuse.mode
    if mode == "full":
        raise ConfigError("verify checks a reuse mode; pass --mode kv or o")
    profile = _resolve_profile(config)
    # Verification couples exactly one block regardless of gen_length.
    run = dataclasses.replace(config.sampler, gen_length=config.model.B,
                              block_size=config.model.B)
    report = verify_run(
        weights, run, profile, mode, trials,
        skip_first_layers=config.reuse.skip_first_layers,
        refresh_interval=config.reuse.refresh_interval,
        debug_zero_bounds=debug_zero_bounds,
    )
    out = _output_dir(config)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    rows = [
        (r["step"], repr(r["step_bound"]), repr(r["step_empirical"]),
         repr(r["cumulative_bound"]), repr(r["cumulative_empirical"]))
        for r in report.per_step_rows()
    ]
    write_csv_with_metadata(
        out / "verify_steps.csv",
        {"kind": "verify_steps", "mode": mode, "trials": trials,
         "violations": report.violations},
        ("step", "step_bound", "step_empirical",
         "cumulative_bound", "cumulative_empirical"),
        rows,
    )
    print(f"G = {report.G!r}")
    print(f"violations = {report.violations}")
    _write_sidecar(config, "verify", trials=trials,
                   debug_zero_bounds=debug_zero_bounds)
    return 0 if report.violations == 0 else 1


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(config: RunConfig, trace_path=None) -> int:
    weights = _load_run_weights(config)
    mode = config.reuse.mode
    profile = _resolve_profile(config) if mode != "full" else None
    tokens, trace = diffusion_generate(
        weights, config.sampler, profile, mode,
        skip_first_layers=config.reuse.skip_first_layers,
        refresh_interval=config.reuse.refresh_interval,
    )
    if trace_path is not None:
        fresh = [json.dumps(r, sort_keys=True) for r in trace.jsonl_records()]
        stored = Path(trace_path).read_text(encoding="utf-8").splitlines()
        if fresh != stored:
            raise ConfigError(
                f"trace {trace_path} does not match this configuration"
            )
    out = _output_dir(config)
    written = []
    L = weights.config.L
    block0 = trace.q_trajectories()[0]
    for ell in range(L):
        if len(block0) >= 2:
            sim = temporal_similarity([step[ell] for step in block0])
            path = out / f"temporal_sim_layer{ell}.csv"
            similarity_csv(sim, path, layer=ell, mode=mode)
            written.append(path)
        scores, skipped = drift_scores_for_layer(trace, ell)
        tau = profile.tau_layer[ell] if profile is not None else None
        hist = histogram_from_scores(scores, ell, tau=tau,
                                     skipped_rows=skipped)
        path = out / f"drift_hist_layer{ell}.csv"
        histogram_csv(hist, path, mode=mode)
        written.append(path)
    if L >= 2:
        x = embed_tokens(weights, tokens[-weights.config.B:])
        _, acts = forward_full(weights, x)
        sim = cross_layer_similarity([a.v for a in acts])
        path = out / "value_layer_sim.csv"
        similarity_csv(sim, path, mode=mode)
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    _write_sidecar(config, "analyze", artifacts=[str(p) for p in written])
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _frozen_block_scores(trace, L: int):
    """Per block, the step-indexed frozen drift scores a replay needs.

    Entry 0 of every block is None (no previous queries); zero-norm rows
    become inf so the replay never reuses them.
    """
    blocks = []
    for trajectory in trace.q_trajectories():
        scores = [None]
        for prev, cur in zip(trajectory, trajectory[1:]):
            step_scores = []
            for ell in range(L):
                row = np.empty(cur[ell].shape[0])
                for i in range(cur[ell].shape[0]):
                    if (np.linalg.norm(prev[ell][i]) == 0.0
                            or np.linalg.norm(cur[ell][i]) == 0.0):
                        row[i] = np.inf
                    else:
                        row[i] = drift_score(cur[ell][i], prev[ell][i])
                step_scores.append(row)
            scores.append(step_scores)
        blocks.append(scores)
    return blocks


def cmd_bench(config: RunConfig, phi_grid) -> int:
    weights = _load_run_weights(config)
    mode = config.reuse.mode
    if mode == "full":
        raise ConfigError("bench sweeps a reuse mode; pass --mode kv or o")
    if not phi_grid:
        raise ConfigError("bench needs a non-empty phi grid")
    for phi_bar in phi_grid:
        if not 0.0 <= phi_bar <= 1.0:
            raise ConfigError(f"phi grid values must lie in [0, 1], got {phi_bar}")
    cfg = weights.config

    # One calibration pass and one frozen reference trajectory feed every
    # grid point; per-point numbers then differ only through tau.
    traces = _calibration_traces(weights, config.sampler)
    raw = [traj for trace in traces for traj in trace.q_trajectories()]
    s_layer, _ = layerwise_drift(raw)
    layer_scores = _pooled_layer_scores(traces, cfg.L)
    _, reference = diffusion_generate(weights, config.sampler, None, "full")
    block_scores = _frozen_block_scores(reference, cfg.L)
    layer_steps = sum(len(t) for t in reference.q_trajectories()) * cfg.L
    full_flops, _, _ = flops_for_trace(reference, config.model, "full")
    cost = CostModel.from_config(config.model)
    per_token_saving = (cost.kv_saving_per_token() if mode == "kv"
                        else cost.o_saving_per_token())

    coupled_cfg = dataclasses.replace(config.sampler, gen_length=cfg.B,
                                      block_size=cfg.B)
    rows = []
    for phi_bar in phi_grid:
        phi = allocate_quantiles(s_layer, phi_bar, config.drift.epsilon)
        tau = tuple(quantile_threshold(scores, float(p))
                    for scores, p in zip(layer_scores, phi))
        total_reused = 0
        eligible = 0
        for scores in block_scores:
            if len(scores) < 2:
                continue  # single-step block: gate forces a full refresh
            replay = simulate_reuse_counterfactual(
                scores, tau, config.reuse.skip_first_layers,
                config.reuse.refresh_interval)
            total_reused += replay.total_reused
            eligible += replay.eligible_slots
        reuse_fraction = (total_reused / (eligible * cfg.B)
                          if eligible else 0.0)
        saved_fraction = per_token_saving * total_reused / full_flops
        profile = DriftProfile(
            s_layer=tuple(float(s) for s in s_layer),
            phi_layer=tuple(float(p) for p in phi),
            tau_layer=tau, phi_bar=phi_bar, epsilon=config.drift.epsilon)
        pair = coupled_generate(
            weights, coupled_cfg, profile, mode,
            skip_first_layers=config.reuse.skip_first_layers,
            refresh_interval=config.reuse.refresh_interval)
        mean_error = float(pair.per_step_l1_gap.mean())
        rows.append((repr(float(phi_bar)), repr(reuse_fraction),
                     repr(saved_fraction), repr(mean_error)))

    out = _output_dir(config)
    write_csv_with_metadata(
        out / "bench.csv",
        {"kind": "bench", "mode": mode, "epsilon": config.drift.epsilon,
         "layer_steps": layer_steps, "grid": [float(p) for p in phi_grid]},
        ("phi_bar", "reuse_fraction", "saved_flop_fraction",
         "mean_coupled_error"),
        rows,
    )
    for row in rows:
        print(", ".join(row))
    print(f"wrote {out / 'bench.csv'}")
    _write_sidecar(config, "bench", grid=[float(p) for p in phi_grid])
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--weights", help="weight file path override")
    parser.add_argument("--output-dir", help="output directory override")
    parser.add_argument("--phi-bar", type=float, help="global reuse budget")
    parser.add_argument("--epsilon", type=float,
                        help="allocation softmax temperature")
    parser.add_argument("--mode", choices=MODES, help="reuse mode")
    parser.add_argument("--tau", type=float, dest="tau",
                        help="flat threshold override (skips calibration)")
    parser.add_argument("--skip-layers", type=int,
                        help="layers exempt from reuse, from the bottom")
    parser.add_argument("--refresh-interval", type=int,
                        help="force a full refresh every this many steps")
    parser.add_argument("--seed", type=int, help="sampler seed override")
    parser.add_argument("--block-size", type=int, help="decode block length")
    parser.add_argument("--steps", type=int, help="denoising steps per block")
    parser.add_argument("--gen-length", type=int, help="total tokens to decode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reuselab",
        description="Desk-scale laboratory for activation reuse in "
                    "masked-diffusion decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create and save model weights")
    _common_flags(p)

    p = sub.add_parser("calibrate", help="fit per-layer reuse thresholds")
    _common_flags(p)
    p.add_argument("--prompts", type=int, default=CALIBRATION_PROMPTS,
                   help="number of calibration generations")

    p = sub.add_parser("generate", help="decode tokens, with or without reuse")
    _common_flags(p)

    p = sub.add_parser("verify", help="check the reuse error bounds")
    _common_flags(p)
    p.add_argument("--trials", type=int, default=50,
                   help="coupled runs to average")
    p.add_argument("--debug-zero-bounds", action="store_true",
                   help="zero every bound (harness self-test; lossy runs "
                        "must then fail)")

    p = sub.add_parser("analyze", help="similarity and drift artifacts")
    _common_flags(p)
    p.add_argument("--trace", help="previously written trace.jsonl to "
                                   "cross-check against")

    p = sub.add_parser("bench", help="sweep the reuse budget phi_bar")
    _common_flags(p)
    p.add_argument("--phi-grid", default="0.0,0.25,0.5,0.75,1.0",
                   help="comma-separated phi_bar values")
    return parser


def build_config(args) -> RunConfig:
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig.default()

    drift_over = {}
    if args.phi_bar is not None:
        drift_over["phi_bar"] = args.phi_bar
    if args.epsilon is not None:
        drift_over["epsilon"] = args.epsilon
    if args.tau is not None:
        drift_over["tau_override"] = args.tau
    if drift_over:
        config = dataclasses.replace(
            config, drift=dataclasses.replace(config.drift, **drift_over))

    reuse_over = {}
    if args.mode is not None:
        reuse_over["mode"] = args.mode
    if args.skip_layers is not None:
        reuse_over["skip_first_layers"] = args.skip_layers
    if args.refresh_interval is not None:
        reuse_over["refresh_interval"] = args.refresh_interval
    if reuse_over:
        config = dataclasses.replace(
            config, reuse=dataclasses.replace(config.reuse, **reuse_over))

    sampler_over = {}
    if args.seed is not None:
        sampler_over["seed"] = args.seed
    if args.block_size is not None:
        sampler_over["block_size"] = args.block_size
    if args.steps is not None:
        sampler_over["steps_per_block"] = args.steps
    if args.gen_length is not None:
        sampler_over["gen_length"] = args.gen_length
    if sampler_over:
        config = dataclasses.replace(
            config, sampler=dataclasses.replace(config.sampler, **sampler_over))

    path_over = {}
    if args.weights is not None:
        path_over["weights"] = args.weights
    if args.output_dir is not None:
        path_over["output_dir"] = args.output_dir
    if path_over:
        config = dataclasses.replace(
            config, paths=dataclasses.replace(config.paths, **path_over))
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "init-model":
            return cmd_init_model(config)
        if args.command == "calibrate":
            return cmd_calibrate(config, prompts=args.prompts)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "verify":
            return cmd_verify(config, trials=args.trials,
                              debug_zero_bounds=args.debug_zero_bounds)
        if args.command == "analyze":
            return cmd_analyze(config, trace_path=args.trace)
        if args.command == "bench":
            grid = [float(p) for p in args.phi_grid.split(",") if p.strip()]
            return cmd_bench(config, grid)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ValueError, RuntimeError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
