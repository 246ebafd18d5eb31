"""Randomised equivalence checks of the row executors against the column oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import column, engine
from .errors import InfeasiblePlanError, RowCNNError
from .netspec import NetworkSpec, init_params, parse_config
from .planner import build_plan

ROW_MODES = ("2ps", "overl", "2ps-h", "overl-h")


@dataclass
class Trial:
    seed: int
    spec: NetworkSpec
    batch: int
    rows: int
    x: np.ndarray
    labels: np.ndarray


@dataclass
class ModeResult:
    seed: int
    mode: str
    rows: int
    segments: list
    grad_rel_err: float
    loss_rel_err: float
    shape_ok: bool
    passed: bool


def _random_layers(rng, n_stages):
    layers = []
    for _ in range(n_stages):
        if rng.random() < 0.7:
            k = int(rng.choice([1, 2, 3, 5]))
            p = int(rng.integers(0, min(k, 3)))
            layers.append({"type": "conv", "c_out": int(rng.integers(1, 4)), "k": k,
                           "s": int(rng.integers(1, 3)), "p": p})
            if rng.random() < 0.6:
                layers.append({"type": "relu"})
        else:
            layers.append({"type": "pool", "kind": str(rng.choice(["max", "avg"])),
                           "k": int(rng.integers(2, 4)), "s": int(rng.integers(1, 3))})
    return layers


def random_config(seed: int) -> dict:
    """A small random network config (as parsed JSON) with 2 to 6 conv/pool stages.

    Some stage after the first has k > s, so neighbouring rows really do
    exchange cached data.
    """
    rng = np.random.default_rng(seed)
    while True:
        n_stages = int(rng.integers(2, 7))
        layers = _random_layers(rng, n_stages)
        stages = [l for l in layers if "k" in l]
        if all(l["k"] <= l["s"] for l in stages[1:]):
            continue
        classes = int(rng.integers(2, 5))
        head = [{"type": "flatten"}]
        if rng.random() < 0.3:
            head += [{"type": "fc", "out": int(rng.integers(2, 6))}, {"type": "relu"}]
        head.append({"type": "fc", "out": classes})
        cfg = {"input": {"c": int(rng.integers(1, 3)), "h": int(rng.integers(8, 65)),
                         "w": int(rng.integers(8, 65))},
               "classes": classes, "layers": layers + head}
        try:
            parse_config_dict(cfg)
        except RowCNNError:
            continue
        return cfg


def parse_config_dict(cfg: dict) -> NetworkSpec:
    return parse_config(json.dumps(cfg))


def make_trial(seed: int, spec: NetworkSpec | None = None) -> Trial:
    """Random network (unless ``spec`` is fixed), batch, row count and data."""
    spec = spec if spec is not None else parse_config_dict(random_config(seed))
    rng = np.random.default_rng(seed + 0x5EED)
    batch = int(rng.choice([1, 2, 4]))
    rows = int(rng.integers(2, 7))
    x = rng.standard_normal((batch,) + spec.input_dims)
    labels = rng.integers(0, spec.class_count, size=batch)
    return Trial(seed, spec, batch, rows, x, labels)


def plan_for(spec: NetworkSpec, mode: str, rows: int, sharing: bool = True, segments=None):
    """The largest valid plan with at most ``rows`` rows (down to 2), or None."""
    for n in range(rows, 1, -1):
        try:
            return build_plan(spec, mode, n, segments, sharing=sharing)
        except InfeasiblePlanError:
            continue
    return None


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def check_trial(trial: Trial, modes=ROW_MODES, tol: float = 1e-9, sharing: bool = True):
    """Compare every mode to the oracle. Returns a list of ModeResult, or None
    if some mode has no valid plan for this network (the caller resamples)."""
    spec = trial.spec
    segs = None
    if spec.L >= 2:
        segs = int(np.random.default_rng(trial.seed + 0xC0).integers(2, spec.L + 1))
    plans = {}
    for mode in modes:
        plan = plan_for(spec, mode, trial.rows, sharing, segs if mode.endswith("-h") else None)
        if plan is None:
            return None
        plans[mode] = plan
    params = init_params(spec, trial.seed)
    tape, loss = column.forward_full(spec, params, trial.x, trial.labels)
    ref = column.backward_full(spec, params, tape)
    z_ref = tape.zs[-1]
    out = []
    for mode, plan in plans.items():
        loss_r, grads, z_last, _ = engine.rowwise_gradients(spec, params, trial.x, trial.labels, plan)
        g_err = max(rel_err(grads[k], ref[k]) for k in ref)
        l_err = abs(loss_r - loss) / max(abs(loss), 1e-300)
        shape_ok = z_last.shape == z_ref.shape
        passed = shape_ok and g_err <= tol and l_err <= tol
        out.append(ModeResult(trial.seed, mode, plan.n_bp, [list(s) for s in plan.segments],
                              g_err, l_err, shape_ok, passed))
    return out


def run_verification(trials: int, seed: int = 0, tol: float = 1e-9, sharing: bool = True,
                     modes=ROW_MODES, max_resample: int = 1000, spec: NetworkSpec | None = None):
    """Run ``trials`` random networks that admit a plan in every mode.

    Returns ``(results, seeds_used)``; seeds whose network had no valid plan
    in some mode are skipped.
    """
    results, used = [], []
    candidate = seed
    skipped = 0
    while len(used) < trials:
        res = check_trial(make_trial(candidate, spec), modes, tol, sharing)
        if res is None:
            skipped += 1
            if skipped > max_resample:
                raise InfeasiblePlanError("too many random networks without a valid row plan")
        else:
            results.extend(res)
            used.append(candidate)
        candidate += 1
    return results, used
