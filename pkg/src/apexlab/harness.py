"""Run orchestration: training loop, step records, checkpoints, summaries and reports.

A run directory holds

* ``config.txt``: the full configuration, defaults included
* ``records.jsonl``: one step record per line, fixed key order
* ``checkpoints/step_XXXXXX.npz``: periodic resumable state
* ``summary.json``: final means and hypervolume series (complete runs)
* ``failure.json``: written instead of a summary when an invariant breaks
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, format_config, load_config
from .errors import ApexError, ConfigError, DomainError, InvariantFailure
from .flowmatch import FlowPolicyParams, NoiseSchedule, TimeGrid, rollout
from .grpo import (
    AdamState,
    ClipConfig,
    RolloutStreams,
    TrainingSetup,
    TrainingState,
    init_training_state,
    training_step,
)
from .pareto import product_improvement_hv, window_means, windowed_cumulative_hv
from .rewards import default_contexts, estimate_utopia, evaluate_rewards_batch
from .scheduler import GradientEstimates, SchedulerConfig, SchedulerState, WeightState

SCHEMA_VERSION = 1
RECORD_KEYS = ("schema", "step", "mode", "weights", "lp", "cp", "pn", "psi", "rewards",
               "pre_norm_variance", "mean_kl_to_ref", "clip_fraction", "loss", "wall_time_ms")
FIGURES = ("dynamics", "factors", "hv", "variance", "stability")
REFERENCE_SEED = 0

# mode -> (weighting, lp_gate, alpha, beta, advantage)
_MODES = {
    "apex": ("p3", 1, 1, 1, "dsan"),
    "static": ("static", 1, 1, 1, "naive"),
    "wo_dsan": ("p3", 1, 1, 1, "naive"),
    "only_lp": ("p3", 1, 0, 0, "dsan"),
    "wo_lp": ("p3", 0, 1, 1, "dsan"),
    "wo_cp": ("p3", 1, 0, 1, "dsan"),
    "wo_pn": ("p3", 1, 1, 0, "dsan"),
}


def scheduler_config(cfg: RunConfig) -> tuple[SchedulerConfig, str]:
    k = cfg.specialist_target
    if k is not None:
        return SchedulerConfig("onehot", tau=cfg.tau, gamma=cfg.gamma, eps=cfg.eps, target=k), "dsan"
    weighting, lp_gate, alpha, beta, adv = _MODES[cfg.mode]
    return SchedulerConfig(weighting, lp_gate, alpha, beta, cfg.tau, cfg.gamma, cfg.eps), adv


def resolve_utopia(cfg: RunConfig) -> tuple[float, ...]:
    if cfg.utopia_source == "configured":
        return tuple(cfg.utopia_values)
    traces = []
    for k, run_dir in enumerate(cfg.utopia_runs):
        try:
            traces.append(reward_log(load_records(run_dir))[:, k])
        except (OSError, IndexError, ValueError) as e:
            raise ConfigError(f"cannot read specialist run {run_dir}: {e}") from None
    return estimate_utopia(traces, cfg.hv_window).u


def build_setup(cfg: RunConfig) -> TrainingSetup:
    sched_cfg, adv = scheduler_config(cfg)
    return TrainingSetup(
        grid=TimeGrid(cfg.T),
        sched=NoiseSchedule(cfg.a, cfg.clamp_delta),
        specs=tuple(cfg.rewards),
        contexts=tuple(default_contexts(cfg.contexts_n, cfg.contexts_spread, cfg.contexts_seed)),
        utopia=resolve_utopia(cfg),
        scheduler=sched_cfg,
        clip=ClipConfig(cfg.eps_clip, cfg.beta_kl),
        advantage=adv,
        run_seed=cfg.seed,
        G=cfg.G,
        B=cfg.B,
        eps=cfg.eps,
        microbatch_size=cfg.microbatch_size,
        scheduler_every=cfg.scheduler_every,
        minibatches=cfg.minibatches,
    )


def initial_params(cfg: RunConfig) -> FlowPolicyParams:
    return FlowPolicyParams.zeros(cfg.d, cfg.features, cfg.feature_seed)


def reference_performance(setup: TrainingSetup, params: FlowPolicyParams, n: int = 64) -> np.ndarray:
    """Mean reward vector of ``params`` over every context, from a fixed evaluation stream."""
    streams = RolloutStreams(REFERENCE_SEED, 0)
    total = np.zeros(setup.K)
    for ctx in setup.contexts:
        rng = streams.get("eval", ctx.id)
        x0 = rng.standard_normal((n, params.d))
        noise = rng.standard_normal((n, setup.grid.T, params.d))
        states, _ = rollout(params, x0, noise, setup.grid, setup.sched)
        total += evaluate_rewards_batch(states[:, -1], ctx, setup.specs).mean(axis=0)
    return total / len(setup.contexts)


def hv_reference(cfg: RunConfig, setup: TrainingSetup | None = None) -> np.ndarray:
    """Reference point in normalized units (rewards divided by their ``r_max``)."""
    if cfg.hv_reference != "initial":
        return np.array([float(v) for v in cfg.hv_reference.split(",")])
    setup = setup or build_setup(cfg)
    raw = reference_performance(setup, initial_params(cfg), cfg.hv_reference_samples)
    return raw / np.asarray(cfg.divisors)


# ---------------------------------------------------------------------------
# records


def _floats(a) -> list[float] | None:
    return None if a is None else [float(v) for v in np.asarray(a).ravel()]


def make_record(step: int, mode: str, diag, wall_ms: float | None) -> dict:
    f = diag.factors
    rec = {
        "schema": SCHEMA_VERSION,
        "step": step,
        "mode": mode,
        "weights": _floats(diag.weights),
        "lp": _floats(f.lp) if f is not None else None,
        "cp": _floats(f.cp) if f is not None else None,
        "pn": _floats(f.pn) if f is not None else None,
        "psi": _floats(f.psi) if f is not None else None,
        "rewards": _floats(diag.reward_means),
        "pre_norm_variance": float(diag.pre_norm_variance),
        "mean_kl_to_ref": float(diag.mean_kl_to_ref),
        "clip_fraction": float(diag.clip_fraction),
        "loss": float(diag.loss),
        "wall_time_ms": wall_ms,
    }
    return rec


def dump_record(rec: dict) -> str:
    try:
        return json.dumps({k: rec[k] for k in RECORD_KEYS}, allow_nan=False)
    except ValueError:
        raise InvariantFailure(f"non-finite value in the record of step {rec['step']}") from None


def validate_record(rec: dict) -> None:
    if list(rec) != list(RECORD_KEYS):
        raise DomainError(f"record keys {list(rec)} do not match schema {SCHEMA_VERSION}")
    if rec["schema"] != SCHEMA_VERSION:
        raise DomainError(f"unsupported record schema {rec['schema']}")


def load_records(run_dir) -> list[dict]:
    path = Path(run_dir) / "records.jsonl"
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                validate_record(rec)
                out.append(rec)
    return out


def reward_log(records: Sequence[dict]) -> np.ndarray:
    return np.array([r["rewards"] for r in records], dtype=float)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainingState) -> None:
    arrays = {
        "version": np.array(SCHEMA_VERSION),
        "step": np.array(state.step),
        "weights_param": state.params.weights,
        "feature_seed": np.array(state.params.feature_seed),
        "ref_param": state.ref_params.weights,
        "adam_m": state.opt.m,
        "adam_v": state.opt.v,
        "adam_step": np.array(state.opt.step),
        "objective_weights": state.weights,
    }
    if state.scheduler is not None:
        g = state.scheduler.grads
        arrays.update(sched_raw=g.raw, sched_ema=g.ema, sched_init=g.initialized,
                      sched_w=state.scheduler.weights.w, sched_step=np.array(state.scheduler.step))
    path = Path(path)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: RunConfig) -> TrainingState:
    with np.load(path) as z:
        if int(z["version"]) != SCHEMA_VERSION:
            raise ConfigError(f"checkpoint {path} has unsupported version {int(z['version'])}")
        seed = int(z["feature_seed"])
        params = FlowPolicyParams(z["weights_param"].copy(), seed)
        ref = FlowPolicyParams(z["ref_param"].copy(), seed)
        opt = AdamState(z["adam_m"].copy(), z["adam_v"].copy(), int(z["adam_step"]), cfg.lr,
                        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        sch = None
        if "sched_ema" in z:
            grads = GradientEstimates(z["sched_raw"].copy(), z["sched_ema"].copy(), cfg.gamma,
                                      z["sched_init"].copy())
            sch = SchedulerState(grads, WeightState(z["sched_w"].copy(), cfg.tau), int(z["sched_step"]))
        return TrainingState(params, ref, opt, sch, z["objective_weights"].copy(), int(z["step"]))


def latest_checkpoint(run_dir) -> Path | None:
    found = sorted((Path(run_dir) / "checkpoints").glob("step_*.npz"))
    found = [p for p in found if not p.name.endswith(".tmp.npz")]
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# running


def summarize(cfg: RunConfig, records: Sequence[dict], ref: np.ndarray) -> dict:
    R = reward_log(records)
    divisors = np.asarray(cfg.divisors)
    series = windowed_cumulative_hv(R, ref, cfg.hv_window, divisors) if len(R) >= cfg.hv_window \
        else np.empty((0, 2))
    means = window_means(R, cfg.hv_window)
    final = means[-1] if len(means) else R.mean(axis=0)
    return {
        "schema": SCHEMA_VERSION,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "steps": len(records),
        "final_means": _floats(final),
        "hv_reference": _floats(ref),
        "hv_series": [[int(i), float(h)] for i, h in series],
        "final_hv": float(series[-1, 1]) if len(series) else 0.0,
        "product_hv": product_improvement_hv(final / divisors, ref),
    }


def _train(cfg: RunConfig, run_dir: Path, setup: TrainingSetup, state: TrainingState,
           log_mode: str) -> None:
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    with open(run_dir / "records.jsonl", log_mode) as log:
        while state.step < cfg.steps:
            step = state.step
            t0 = time.perf_counter()
            try:
                state, diag = training_step(state, setup)
                wall = round((time.perf_counter() - t0) * 1e3, 3) if cfg.log_timing else None
                line = dump_record(make_record(step, cfg.mode, diag, wall))
            except (InvariantFailure, DomainError) as e:
                _write_json(run_dir / "failure.json", {
                    "step": step, "error": type(e).__name__, "message": str(e)})
                raise InvariantFailure(f"step {step}: {e}") from e
            log.write(line + "\n")
            log.flush()
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                save_checkpoint(ckpt_dir / f"step_{state.step:06d}.npz", state)
    records = load_records(run_dir)
    _write_json(run_dir / "summary.json", summarize(cfg, records, hv_reference(cfg, setup)))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def run(cfg: RunConfig, out_dir) -> Path:
    """Train ``cfg.steps`` steps from scratch into ``out_dir`` and return it."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("records.jsonl", "summary.json", "failure.json"):
        (run_dir / stale).unlink(missing_ok=True)
    for old in (run_dir / "checkpoints").glob("*.npz"):
        old.unlink()
    (run_dir / "config.txt").write_text(format_config(cfg))
    setup = build_setup(cfg)
    state = init_training_state(setup, initial_params(cfg), cfg.lr,
                                (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    _train(cfg, run_dir, setup, state, "w")
    return run_dir


def resume(run_dir, steps: int | None = None) -> Path:
    """Continue a run from its latest checkpoint, optionally extending ``steps``."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    if steps is not None:
        cfg = replace(cfg, steps=steps)
        (run_dir / "config.txt").write_text(format_config(cfg))
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        return run(cfg, run_dir)
    state = load_checkpoint(ckpt, cfg)
    lines = (run_dir / "records.jsonl").read_text().splitlines(keepends=True)
    if len(lines) < state.step:
        raise ConfigError(f"{run_dir} has {len(lines)} records but a checkpoint at step {state.step}")
    (run_dir / "records.jsonl").write_text("".join(lines[:state.step]))
    (run_dir / "failure.json").unlink(missing_ok=True)
    _train(cfg, run_dir, build_setup(cfg), state, "a")
    return run_dir


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunView:
    run_dir: Path
    cfg: RunConfig
    records: list[dict]

    @classmethod
    def load(cls, run_dir) -> RunView:
        run_dir = Path(run_dir)
        try:
            cfg = load_config(run_dir / "config.txt")
            records = load_records(run_dir)
        except OSError as e:
            raise ConfigError(f"{run_dir} is not a run directory: {e}") from None
        return cls(run_dir, cfg, records)

    @property
    def label(self) -> str:
        return f"{self.cfg.mode}_s{self.cfg.seed}"


def _reward_signature(cfg: RunConfig) -> list[str]:
    return [l for l in format_config(cfg).splitlines() if l.startswith(("reward.", "K ", "hv.", "contexts."))]


@dataclass
class ComparisonReport:
    labels: list[str]
    full: str
    reference: np.ndarray
    hv_curves: dict[str, np.ndarray]
    final_hv: dict[str, float]
    delta_pct: dict[str, float | None]
    final_means: dict[str, np.ndarray]
    objectives: list[str]

    def to_text(self) -> str:
        lines = [f"reference (normalized): {', '.join(f'{v:.6g}' for v in self.reference)}",
                 f"{'run':<24}{'final HV':>14}{'delta vs ' + self.full:>28}"]
        for lab in self.labels:
            d = self.delta_pct[lab]
            ds = "n/a" if d is None else f"{d:+.1f}%"
            lines.append(f"{lab:<24}{self.final_hv[lab]:>14.6g}{ds:>28}")
        lines.append("")
        lines.append(f"{'run':<24}" + "".join(f"{n:>14}" for n in self.objectives))
        for lab in self.labels:
            lines.append(f"{lab:<24}" + "".join(f"{v:>14.5g}" for v in self.final_means[lab]))
        return "\n".join(lines) + "\n"


def _unique_labels(views: Sequence[RunView]) -> list[str]:
    labels, seen = [], {}
    for v in views:
        lab = v.label
        seen[lab] = seen.get(lab, 0) + 1
        labels.append(lab if seen[lab] == 1 else f"{lab}_{seen[lab]}")
    return labels


def compare(run_dirs: Sequence, full: int = 0) -> ComparisonReport:
    """Windowed cumulative HV of several runs against a common reference.

    ``full`` indexes the run the percentage deltas are taken against.
    """
    views = [RunView.load(d) for d in run_dirs]
    if not views:
        raise ConfigError("nothing to compare")
    sig = _reward_signature(views[0].cfg)
    for v in views[1:]:
        if _reward_signature(v.cfg) != sig:
            raise ConfigError(f"{v.run_dir} uses different objectives or HV settings")
    base = views[full]
    ref = hv_reference(base.cfg)
    window = base.cfg.hv_window
    divisors = np.asarray(base.cfg.divisors)
    labels = _unique_labels(views)
    curves, finals, means = {}, {}, {}
    for lab, v in zip(labels, views):
        R = reward_log(v.records)
        curves[lab] = windowed_cumulative_hv(R, ref, window, divisors)
        finals[lab] = float(curves[lab][-1, 1]) if len(curves[lab]) else 0.0
        wm = window_means(R, window)
        means[lab] = wm[-1] if len(wm) else R.mean(axis=0)
    hv_full = finals[labels[full]]
    deltas = {lab: (None if hv_full == 0 else (finals[lab] / hv_full - 1.0) * 100.0) for lab in labels}
    names = [s.name for s in base.cfg.rewards]
    return ComparisonReport(labels, labels[full], ref, curves, finals, deltas, means, names)


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first points average over what is available."""
    y = np.asarray(y, dtype=float)
    c = np.cumsum(np.insert(y, 0, 0.0))
    n = np.arange(1, len(y) + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


def _write_table(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    rows = np.column_stack(columns) if columns else np.empty((0, 0))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if not np.isfinite(v) else repr(float(v)) for v in row) + "\n")


def _series(view: RunView, key: str, k: int | None = None) -> np.ndarray:
    out = []
    for r in view.records:
        v = r[key]
        out.append(np.nan if v is None else (v[k] if k is not None else v))
    return np.asarray(out, dtype=float)


def emit_plot_data(run_dirs: Sequence, figure: str, out_dir, smooth: int | None = None) -> list[Path]:
    """Write one delimited file per subplot of ``figure`` and return their paths.

    With ``smooth`` set, series are replaced by a trailing moving average and
    the column names carry a ``_ma<window>`` suffix.
    """
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    if smooth is not None and smooth < 1:
        raise ConfigError("smoothing window must be positive")
    views = [RunView.load(d) for d in run_dirs]
    if not views:
        raise ConfigError("no runs given")
    labels = _unique_labels(views)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = f"_ma{smooth}" if smooth else ""

    def prep(y):
        return _smooth(y, smooth) if smooth else y

    def table(name, ycols, names, x=None, xname="step"):
        if x is None:
            n = min(len(y) for y in ycols)
            x = np.arange(n, dtype=float)
            ycols = [y[:n] for y in ycols]
        path = out / f"{name}.csv"
        _write_table(path, [xname] + [f"{c}{suffix}" for c in names], [x] + [prep(y) for y in ycols])
        return path

    objectives = [s.name for s in views[0].cfg.rewards]
    written = []
    if figure == "dynamics":
        for k, obj in enumerate(objectives):
            written.append(table(f"dynamics_{obj}", [_series(v, "rewards", k) for v in views],
                                 [f"{lab}_reward" for lab in labels]))
    elif figure == "factors":
        for key in ("lp", "cp", "pn", "psi", "weights"):
            cols, names = [], []
            for lab, v in zip(labels, views):
                for k, obj in enumerate(objectives):
                    cols.append(_series(v, key, k))
                    names.append(f"{lab}_{obj}")
            written.append(table(f"factors_{key}", cols, names))
    elif figure == "variance":
        written.append(table("variance", [_series(v, "pre_norm_variance") for v in views],
                             [f"{lab}_pre_norm_variance" for lab in labels]))
    elif figure == "stability":
        written.append(table("stability_kl", [_series(v, "mean_kl_to_ref") for v in views],
                             [f"{lab}_mean_kl_to_ref" for lab in labels]))
        written.append(table("stability_clip", [_series(v, "clip_fraction") for v in views],
                             [f"{lab}_clip_fraction" for lab in labels]))
    else:
        rep = compare(run_dirs)
        n = min(len(c) for c in rep.hv_curves.values())
        x = np.arange(n, dtype=float)
        written.append(table("hv", [rep.hv_curves[lab][:n, 1] for lab in labels],
                             [f"{lab}_hv" for lab in labels], x=x, xname="window"))
    return written


__all__ = [
    "FIGURES", "RECORD_KEYS", "SCHEMA_VERSION", "ApexError", "ComparisonReport", "RunView",
    "build_setup", "compare", "emit_plot_data", "hv_reference", "load_checkpoint",
    "load_records", "make_record", "reference_performance", "resume", "reward_log", "run",
    "save_checkpoint", "scheduler_config", "summarize",
]
