"""Adam and L-BFGS over flattened model parameters, plus the training loop.

Two L-BFGS step policies are provided. `lbfgs_step` takes a fixed step of
size `lr` along the two-loop direction. `lbfgs_step_armijo` backtracks from a
warm-started trial step until sufficient decrease holds, which is what the
training loop uses: on this loss (ReLU networks plus an L1 data term) fixed
steps at any size measurably stall or oscillate, while backtracked steps
descend monotonically. An L-BFGS training epoch performs `lbfgs_inner`
such steps, mirroring how batch L-BFGS optimizers iterate internally per
outer call.

Training runs full-graph epochs: an Adam phase followed by an L-BFGS phase,
with a hard divergence guard.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graphnet as gn
from . import physics as ph
from .mesh import Graph

DIVERGENCE_FACTOR = 1e6


class NonFiniteGradientError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Standard bias-corrected Adam update; mutates state, returns new params."""
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} vs params {params.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NonFiniteGradientError(
            f"non-finite gradient (first at coordinate {bad}, "
            f"|grad| max {np.abs(grad[np.isfinite(grad)]).max():.3e})")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LbfgsState:
    lr: float
    history_size: int = 10
    curvature_threshold: float = 1e-10
    pairs: deque = field(default_factory=lambda: deque(maxlen=10))
    step_scale: float = 1.0  # warm start for the Armijo backtracker

    def __post_init__(self):
        self.pairs = deque(self.pairs, maxlen=self.history_size)

    def _push(self, s: np.ndarray, y: np.ndarray) -> None:
        curvature = float(s @ y)
        if curvature > self.curvature_threshold:
            self.pairs.append((s, y, 1.0 / curvature))


def _two_loop_direction(pairs, grad: np.ndarray) -> np.ndarray:
    """L-BFGS two-loop recursion; exact steepest descent with empty history."""
    q = grad.copy()
    if not pairs:
        return -q
    alphas = []
    for s, y, rho in reversed(pairs):
        alpha = rho * float(s @ q)
        alphas.append(alpha)
        q -= alpha * y
    s, y, _ = pairs[-1]
    gamma = float(s @ y) / float(y @ y)
    q *= gamma
    for (s, y, rho), alpha in zip(pairs, reversed(alphas)):
        beta = rho * float(y @ q)
        q += (alpha - beta) * s
    return -q


def lbfgs_step(state: LbfgsState, params: np.ndarray, grad: np.ndarray, loss_fn):
    """One fixed-step L-BFGS update: params + lr * two-loop direction.

    loss_fn maps a parameter vector to (loss, grad, aux); returns the new
    params together with that trial evaluation so the caller can chain steps
    with a single evaluation each. A non-finite trial rejects the step,
    clears the history and falls back to steepest descent.
    """
    direction = _two_loop_direction(state.pairs, grad)
    trial = params + state.lr * direction
    loss, new_grad, aux = loss_fn(trial)
    if not np.isfinite(loss) or not np.all(np.isfinite(new_grad)):
        state.pairs.clear()
        trial = params - state.lr * grad
        loss, new_grad, aux = loss_fn(trial)
        return trial, loss, new_grad, aux
    state._push(trial - params, new_grad - grad)
    return trial, loss, new_grad, aux


def lbfgs_step_armijo(state: LbfgsState, params: np.ndarray, grad: np.ndarray,
                      loss: float, loss_fn, max_backtracks: int = 30,
                      sufficient_decrease: float = 1e-4):
    """One backtracking L-BFGS update.

    Starts from a warm-started trial step (at most the full two-loop step),
    halving until the Armijo condition holds; non-descent directions reset
    the history to steepest descent. Non-finite trials simply fail the
    condition and backtrack further. The state's lr plays no role here; it
    belongs to the fixed-step policy.
    """
    direction = _two_loop_direction(state.pairs, grad)
    slope = float(grad @ direction)
    if slope >= 0.0:
        state.pairs.clear()
        direction = -grad
        slope = -float(grad @ grad)
    t = min(1.0, 2.0 * state.step_scale)
    trial, new_loss, new_grad, aux = params, loss, grad, None
    for _ in range(max_backtracks):
        trial = params + t * direction
        new_loss, new_grad, aux = loss_fn(trial)
        if np.isfinite(new_loss) and new_loss <= loss + sufficient_decrease * t * slope:
            break
        t *= 0.5
    state.step_scale = t
    state._push(trial - params, new_grad - grad)
    return trial, new_loss, new_grad, aux


@dataclass(frozen=True)
class TrainSchedule:
    adam_epochs: int
    adam_lr: float
    lbfgs_epochs: int = 0
    lbfgs_lr: float = 2e-3          # step size for the fixed-step policy
    lbfgs_inner: int = 20           # quasi-Newton iterations per L-BFGS epoch
    lbfgs_line_search: str = "armijo"  # "armijo" | "fixed"
    physics_weight: float = 1.0
    data_weight: float = 1.0


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    report: ph.LossReport


def make_loss_fn(case: ph.PhysicsCase, graph: Graph, u_true: np.ndarray,
                 params_template: gn.ModelParams, physics_weight: float = 1.0,
                 data_weight: float = 1.0):
    """Closure: flat parameter vector -> (loss, flat gradient, LossReport)."""

    def loss_fn(vec: np.ndarray):
        params = gn.unflatten_params(params_template, vec)
        tape = ad.Tape()
        result = gn.forward(tape, params, graph)
        total, report = ph.hybrid_loss(tape, case, result.u, result.lam, u_true,
                                       physics_weight=physics_weight,
                                       data_weight=data_weight)
        tape.backward(total)
        return float(total.data), gn.collect_gradient(result), report

    return loss_fn


def train(case: ph.PhysicsCase, graph: Graph, u_true: np.ndarray,
          params: gn.ModelParams, schedule: TrainSchedule):
    """Full-graph training: Adam phase then L-BFGS phase.

    Returns (trained params, per-epoch history). Deterministic for fixed
    inputs. Raises TrainingDivergedError (with the history so far attached)
    if the loss exceeds 1e6 times its initial value.
    """
    loss_fn = make_loss_fn(case, graph, u_true, params,
                           physics_weight=schedule.physics_weight,
                           data_weight=schedule.data_weight)
    vec = gn.flatten_params(params)
    history: list[EpochRecord] = []
    initial_total: float | None = None
    epoch = 0

    def guard(loss, phase):
        nonlocal initial_total
        if initial_total is None:
            initial_total = max(abs(loss), 1e-300)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial_total:
            raise TrainingDivergedError(
                f"loss {loss:.6e} diverged in {phase} phase at epoch {epoch} "
                f"(initial {initial_total:.6e})", history)

    adam = AdamState(lr=schedule.adam_lr)
    for _ in range(schedule.adam_epochs):
        loss, grad, report = loss_fn(vec)
        guard(loss, "adam")
        history.append(EpochRecord(epoch=epoch, phase="adam", report=report))
        vec = adam_step(adam, vec, grad)
        epoch += 1

    if schedule.lbfgs_epochs > 0:
        if schedule.lbfgs_line_search not in ("armijo", "fixed"):
            raise ValueError(f"unknown line search {schedule.lbfgs_line_search!r}")
        lbfgs = LbfgsState(lr=schedule.lbfgs_lr)
        loss, grad, report = loss_fn(vec)
        guard(loss, "lbfgs")
        for _ in range(schedule.lbfgs_epochs):
            history.append(EpochRecord(epoch=epoch, phase="lbfgs", report=report))
            for _ in range(max(1, schedule.lbfgs_inner)):
                if schedule.lbfgs_line_search == "armijo":
                    vec, loss, grad, report = lbfgs_step_armijo(
                        lbfgs, vec, grad, loss, loss_fn)
                else:
                    vec, loss, grad, report = lbfgs_step(lbfgs, vec, grad, loss_fn)
                guard(loss, "lbfgs")
            epoch += 1

    return gn.unflatten_params(params, vec), history


def history_rows(history) -> list:
    """CSV rows: epoch, phase, stat_u, stat_lambda, data, total."""
    rows = []
    for record in history:
        r = record.report
        rows.append((record.epoch, record.phase, r.stat_u, r.stat_lambda,
                     r.data, r.total))
    return rows
