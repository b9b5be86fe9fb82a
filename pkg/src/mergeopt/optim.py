"""Adam-family optimizer with online merging variants and regularization baselines.

One optimizer step is a single logical transaction: the step counter t moves
by exactly one, moment updates happen identically for every variant, and the
variants differ only in how the per-tensor update delta is post-processed
before it lands on the parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import MisalignedSets, MissingBaseModel, NonFiniteGradient
from .kernels import sign_consensus, sparsify_random, sparsify_top_p, validate_probability
from .masks import MaskKey, bernoulli_mask
from .params import DeltaSet, ParameterSet, check_aligned, load_checkpoint, save_checkpoint

MASK_STREAM_UPDATE = "update"
MASK_STREAM_REF = "ref"
MASK_STREAM_GRAD = "grad"

_STATE_PREFIXES = ("__m.", "__v.", "__dc.", "__tau.", "__ema.")


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 5e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    bias_correction: bool = True

    def __post_init__(self):
        ok = (
            math.isfinite(self.learning_rate)
            and self.learning_rate > 0
            and 0 <= self.beta1 < 1
            and 0 <= self.beta2 < 1
            and math.isfinite(self.epsilon)
            and self.epsilon > 0
            and math.isfinite(self.weight_decay)
            and self.weight_decay >= 0
        )
        if not ok:
            raise ValueError(f"invalid Adam hyperparameters: {self}")

    @classmethod
    def pseudocode_literal(cls, learning_rate: float = 5e-7, **kw) -> "AdamHyper":
        """Preset without bias correction or decay, matching the raw update
        m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2; d = -lr*m/sqrt(v+eps)."""
        return cls(learning_rate=learning_rate, bias_correction=False, weight_decay=0.0, **kw)


class MergeVariant(Enum):
    NONE = "none"
    ONDARE = "ondare"
    ONTIES = "onties"
    FULL_MERGE = "fullmerge"


@dataclass(frozen=True)
class OnlineMergeConfig:
    """How each update delta is merged with the reference delta.

    gap_step K = 1 merges every step (fully online); K = T merges once at the
    end of a T-step run. base_for_full_merge is only needed by FULL_MERGE,
    the unrelaxed formulation that re-anchors every step on the base model.
    """

    variant: MergeVariant = MergeVariant.NONE
    alpha: float = 1e-6
    reserve_rate: float = 0.5
    gap_step: int = 1
    base_for_full_merge: Optional[ParameterSet] = None

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and 0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        validate_probability(self.reserve_rate)
        if int(self.gap_step) != self.gap_step or self.gap_step < 1:
            raise ValueError(f"gap_step must be an integer >= 1, got {self.gap_step}")
        object.__setattr__(self, "gap_step", int(self.gap_step))


class OptimizerState:
    """Per-tensor Adam moments, the step counter, the cached reference delta,
    the step-K accumulator, and an optional EMA shadow of the parameters.

    The base model is deliberately not part of the state: the relaxed online
    merge needs only tau_ref, which is cached once at init and never mutated.
    """

    def __init__(
        self,
        params: ParameterSet,
        tau_ref: Optional[DeltaSet] = None,
        seed: int = 0,
        track_ema: bool = False,
    ):
        if tau_ref is not None:
            check_aligned(params, tau_ref)
        self.m = {n: np.zeros(a.size) for n, _, a in params}
        self.v = {n: np.zeros(a.size) for n, _, a in params}
        self.delta_cache = {n: np.zeros(a.size) for n, _, a in params}
        self.t = 0
        self.tau_ref = tau_ref
        self.seed = int(seed)
        self.ema = {n: a.copy() for n, _, a in params} if track_ema else None
        self._shapes = {n: s for n, s, _ in params}

    def ema_parameters(self) -> Optional[ParameterSet]:
        if self.ema is None:
            return None
        return ParameterSet((n, s, self.ema[n]) for n, s in self._shapes.items())


def adam_delta(state: OptimizerState, name: str, grad, hyper: AdamHyper) -> np.ndarray:
    """Advance the named tensor's moments with this gradient and return the
    raw update delta -lr * mhat / sqrt(vhat + eps).

    Moments are mutated in place; bias correction uses the current step
    counter, which the caller must already have incremented.
    """
    g = np.asarray(grad, dtype=np.float64).reshape(-1)
    m = state.m[name]
    if g.size != m.size:
        raise MisalignedSets(f"{name}: gradient has {g.size} elements, state has {m.size}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"{name}: gradient contains NaN or infinity")
    v = state.v[name]
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * g
    v *= hyper.beta2
    v += (1.0 - hyper.beta2) * np.square(g)
    if hyper.bias_correction:
        mhat = m / (1.0 - hyper.beta1**state.t)
        vhat = v / (1.0 - hyper.beta2**state.t)
    else:
        mhat, vhat = m, v
    return -hyper.learning_rate * mhat / np.sqrt(vhat + hyper.epsilon)


def _update_delta(
    state: OptimizerState, name: str, grad, theta: np.ndarray, hyper: AdamHyper
) -> np.ndarray:
    """Full per-step change: Adam delta plus decoupled decay folded in, so the
    merge operators govern the entire parameter change."""
    d = adam_delta(state, name, grad, hyper)
    if hyper.weight_decay != 0.0:
        d = d - hyper.learning_rate * hyper.weight_decay * theta
    return d


def _begin_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState) -> None:
    check_aligned(params, grads)
    state.t += 1


def _rebuild(params: ParameterSet, new_arrays: dict) -> ParameterSet:
    return ParameterSet((n, s, new_arrays[n]) for n, s, _ in params)


def _require_variant(cfg: OnlineMergeConfig, expected: MergeVariant) -> None:
    if cfg.variant is not expected:
        raise ValueError(f"config variant is {cfg.variant}, expected {expected}")


def _merged_update(
    which: MergeVariant,
    delta_arr: np.ndarray,
    tau_arr: np.ndarray,
    cfg: OnlineMergeConfig,
    seed: int,
    name: str,
    step: int,
) -> np.ndarray:
    """The online merge of one tensor's update delta with its reference delta.

    Neither side is rescaled: rescaling is essential offline but destabilizes
    multi-step optimization. The two sparsifications use independent mask
    streams under the shared seed.
    """
    a_weight = 1.0 - cfg.alpha
    if which is MergeVariant.ONDARE:
        key_u = MaskKey(seed, name, step, MASK_STREAM_UPDATE)
        key_r = MaskKey(seed, name, step, MASK_STREAM_REF)
        return a_weight * sparsify_random(delta_arr, cfg.reserve_rate, key_u) + (
            cfg.alpha * sparsify_random(tau_arr, cfg.reserve_rate, key_r)
        )
    if which is MergeVariant.ONTIES:
        a = a_weight * sparsify_top_p(delta_arr, cfg.reserve_rate)
        b = cfg.alpha * sparsify_top_p(tau_arr, cfg.reserve_rate)
        return sign_consensus(a, b)
    raise ValueError(f"no online merge rule for {which}")


def adam_step(
    params: ParameterSet, grads: ParameterSet, state: OptimizerState, hyper: AdamHyper
) -> ParameterSet:
    """Plain Adam/AdamW: theta <- theta + delta, no merging."""
    _begin_step(params, grads, state)
    new = {}
    for name, _, theta in params:
        new[name] = theta + _update_delta(state, name, grads.flat(name), theta, hyper)
    return _rebuild(params, new)


def ondare_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    hyper: AdamHyper,
    cfg: OnlineMergeConfig,
) -> ParameterSet:
    """Random-sparsify both the update delta and the reference delta, then
    combine them linearly with weights (1 - alpha, alpha)."""
    _require_variant(cfg, MergeVariant.ONDARE)
    return _online_step(params, grads, state, hyper, cfg, MergeVariant.ONDARE)


def onties_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    hyper: AdamHyper,
    cfg: OnlineMergeConfig,
) -> ParameterSet:
    """Top-p sparsify both sides and combine them with elementwise sign
    consensus instead of addition."""
    _require_variant(cfg, MergeVariant.ONTIES)
    return _online_step(params, grads, state, hyper, cfg, MergeVariant.ONTIES)


def _online_step(params, grads, state, hyper, cfg, which) -> ParameterSet:
    if state.tau_ref is None:
        raise ValueError("online merging needs a cached reference delta in the state")
    _begin_step(params, grads, state)
    new = {}
    for name, _, theta in params:
        d = _update_delta(state, name, grads.flat(name), theta, hyper)
        upd = _merged_update(which, d, state.tau_ref.flat(name), cfg, state.seed, name, state.t)
        new[name] = theta + upd
    return _rebuild(params, new)


def full_merge_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    hyper: AdamHyper,
    cfg: OnlineMergeConfig,
) -> ParameterSet:
    """Unrelaxed online merge, re-anchored on the base model every step:

        theta <- base + (1-alpha)*F(theta - base + delta) + alpha*F(tau_ref)

    Kept for reproducing the instability of merging the whole trajectory
    instead of just the current update.
    """
    _require_variant(cfg, MergeVariant.FULL_MERGE)
    if cfg.base_for_full_merge is None:
        raise MissingBaseModel("full merge requires base model parameters in the config")
    if state.tau_ref is None:
        raise ValueError("online merging needs a cached reference delta in the state")
    base = cfg.base_for_full_merge
    check_aligned(params, base)
    _begin_step(params, grads, state)
    new = {}
    for name, _, theta in params:
        d = _update_delta(state, name, grads.flat(name), theta, hyper)
        shifted = (theta - base.flat(name)) + d
        merged = _merged_update(
            MergeVariant.ONDARE, shifted, state.tau_ref.flat(name), cfg, state.seed, name, state.t
        )
        new[name] = base.flat(name) + merged
    return _rebuild(params, new)


def stepk_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    hyper: AdamHyper,
    cfg: OnlineMergeConfig,
) -> ParameterSet:
    """Gap-step online merging: accumulate plain Adam updates for K-1 steps,
    then roll the parameters back to the last merge point and merge the whole
    accumulated displacement in one go.

    K = 1 degenerates to the fully online optimizer; K = T is a single
    end-of-run merge over the total displacement.
    """
    if cfg.variant not in (MergeVariant.ONDARE, MergeVariant.ONTIES):
        raise ValueError(f"step-K requires an online merge variant, got {cfg.variant}")
    if state.tau_ref is None:
        raise ValueError("online merging needs a cached reference delta in the state")
    _begin_step(params, grads, state)
    merging = state.t % cfg.gap_step == 0
    new = {}
    for name, _, theta in params:
        d = _update_delta(state, name, grads.flat(name), theta, hyper)
        cache = state.delta_cache[name]
        if not merging:
            cache += d
            new[name] = theta + d
        else:
            rolled_back = theta - cache
            d_total = d + cache
            cache[:] = 0.0
            upd = _merged_update(
                cfg.variant, d_total, state.tau_ref.flat(name), cfg, state.seed, name, state.t
            )
            new[name] = rolled_back + upd
    return _rebuild(params, new)


def childtuning_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    hyper: AdamHyper,
    reserve_rate: float,
) -> ParameterSet:
    """Task-free gradient dropout: mask the gradient with Bernoulli(p) and
    rescale the survivors by 1/p before the Adam update. The mask sits on the
    gradient, unlike online merging which masks the update delta (without
    rescale)."""
    p = validate_probability(reserve_rate)
    _begin_step(params, grads, state)
    new = {}
    for name, _, theta in params:
        g = grads.flat(name)
        key = MaskKey(state.seed, name, state.t, MASK_STREAM_GRAD)
        masked = np.where(bernoulli_mask(key, g.size, p), g, 0.0) / p
        new[name] = theta + _update_delta(state, name, masked, theta, hyper)
    return _rebuild(params, new)


def ema_update(state: OptimizerState, params: ParameterSet, coefficient: float = 1e-3) -> None:
    """shadow <- (1 - c) * shadow + c * theta, applied after a base step.

    Evaluation and serialization use the shadow when EMA is enabled.
    """
    c = float(coefficient)
    if not (0.0 < c < 1.0):
        raise ValueError(f"EMA coefficient must be in (0, 1), got {coefficient}")
    if state.ema is None:
        state.ema = {n: a.copy() for n, _, a in params}
        return
    for name, _, theta in params:
        shadow = state.ema[name]
        shadow *= 1.0 - c
        shadow += c * theta


def save_optimizer_state(state: OptimizerState, path, scalars: Optional[dict] = None) -> None:
    """Serialize moments and cached deltas to a PSET1 container with reserved
    name prefixes, plus a JSON sidecar for the scalar state."""
    entries = []
    for prefix, table in (("__m.", state.m), ("__v.", state.v), ("__dc.", state.delta_cache)):
        for name, shape in state._shapes.items():
            entries.append((prefix + name, shape, table[name]))
    if state.tau_ref is not None:
        for name, shape, arr in state.tau_ref:
            entries.append(("__tau." + name, shape, arr))
    if state.ema is not None:
        for name, shape in state._shapes.items():
            entries.append(("__ema." + name, shape, state.ema[name]))
    save_checkpoint(ParameterSet(entries), path)
    sidecar = {
        "t": state.t,
        "seed": state.seed,
        "tau_base_fingerprint": getattr(state.tau_ref, "base_fingerprint", None),
    }
    if scalars:
        sidecar.update(scalars)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_optimizer_state(path) -> tuple[OptimizerState, dict]:
    """Inverse of save_optimizer_state; returns the state and its sidecar."""
    container = load_checkpoint(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    groups: dict[str, list] = {p: [] for p in _STATE_PREFIXES}
    for name, shape, arr in container:
        for prefix in _STATE_PREFIXES:
            if name.startswith(prefix):
                groups[prefix].append((name[len(prefix) :], shape, arr))
                break
        else:
            raise ValueError(f"unexpected tensor {name!r} in optimizer state container")
    shell = ParameterSet(groups["__m."])
    state = OptimizerState(shell, seed=sidecar.get("seed", 0))
    state.t = int(sidecar["t"])
    state.m = {n: a.copy() for n, _, a in ParameterSet(groups["__m."])}
    state.v = {n: a.copy() for n, _, a in ParameterSet(groups["__v."])}
    state.delta_cache = {n: a.copy() for n, _, a in ParameterSet(groups["__dc."])}
    if groups["__tau."]:
        state.tau_ref = DeltaSet(
            groups["__tau."], base_fingerprint=sidecar.get("tau_base_fingerprint") or ""
        )
    if groups["__ema."]:
        state.ema = {n: a.copy() for n, _, a in ParameterSet(groups["__ema."])}
    return state, sidecar
