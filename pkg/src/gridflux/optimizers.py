"""
First-order optimizers and learning-rate schedulers on a flat parameter vector.

Optimizers: Adam, SGD (with momentum) and RMSprop. Schedulers: constant,
step_lr, multi_step_lr and reduce_on_plateau (min mode, relative threshold).
The update rules follow the conventions of the common deep-learning frameworks
so that hyperparameters tuned there carry over.

Configurations are frozen dataclasses; the mutable optimizer and scheduler
states are owned by a single solver run.

`PRESETS` holds the tuned hyperparameter sets:

- dpf-118: static solve of a 118-bus class grid.
- dpf-9241: static solve of a 9,241-bus class grid (lower learning rate).
- ts-first: first step of a time series, from flat start.
- ts-warm: subsequent time-series steps, warm-started from the previous solution.
"""

import dataclasses
import math

import numpy as np

OPTIMIZER_KINDS = ("adam", "sgd", "rmsprop")
SCHEDULER_KINDS = ("constant", "step_lr", "multi_step_lr", "reduce_on_plateau")


class NonFiniteGradientError(FloatingPointError):
    """Gradient contains NaN or infinite entries."""


class UnknownPresetError(KeyError):
    """No preset with the requested name."""

    def __str__(self):
        return str(self.args[0])


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """
    Optimizer hyperparameters.

    Attributes
    ----------
    kind : str
        One of "adam", "sgd", "rmsprop".
    lr : float
        Learning rate.
    beta1, beta2 : float
        Adam decay rates of the first and second moment estimates.
    momentum : float
        SGD momentum.
    alpha : float
        RMSprop smoothing constant.
    eps : float
        Numerical floor added to the denominator of Adam and RMSprop.
    """

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.0
    alpha: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            msg = f"Unknown optimizer {self.kind!r}, expected one of {OPTIMIZER_KINDS}"
            raise ValueError(msg)
        if not self.lr > 0:
            msg = f"Learning rate should be positive, got {self.lr}"
            raise ValueError(msg)
        for name in ("beta1", "beta2", "alpha", "momentum"):
            value = getattr(self, name)
            if not 0 <= value < 1:
                msg = f"{name} should be in [0, 1), got {value}"
                raise ValueError(msg)


@dataclasses.dataclass
class OptimizerState:
    """
    Mutable optimizer state.

    Attributes
    ----------
    step_count : int
        Number of steps taken.
    m, v : numpy.ndarray
        First and second moment estimates (Adam, RMSprop uses v).
    buf : numpy.ndarray or None
        SGD momentum buffer; None before the first step.
    """

    step_count: int
    m: np.ndarray
    v: np.ndarray
    buf: np.ndarray | None = None


@dataclasses.dataclass(frozen=True)
class SchedulerConfig:
    """
    Learning-rate scheduler settings.

    Attributes
    ----------
    kind : str
        One of "constant", "step_lr", "multi_step_lr", "reduce_on_plateau".
    step_size : int
        Period of step_lr in scheduler steps.
    gamma : float
        Multiplicative decay of step_lr and multi_step_lr.
    milestones : tuple of int
        Scheduler steps at which multi_step_lr decays.
    factor : float
        Multiplicative decay of reduce_on_plateau.
    patience : int
        Number of non-improving evaluations tolerated before a reduction.
    threshold : float
        Relative improvement needed to reset patience.
    cooldown : int
        Evaluations after a reduction during which bad evaluations are not counted.
    min_lr : float
        Lower bound on the learning rate of reduce_on_plateau.
    """

    kind: str = "constant"
    step_size: int = 100
    gamma: float = 0.1
    milestones: tuple = ()
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    cooldown: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULER_KINDS:
            msg = f"Unknown scheduler {self.kind!r}, expected one of {SCHEDULER_KINDS}"
            raise ValueError(msg)
        if not (0 < self.factor <= 1 and 0 < self.gamma <= 1):
            msg = f"factor and gamma should be in (0, 1], got {self.factor} and {self.gamma}"
            raise ValueError(msg)
        if self.patience < 0 or self.cooldown < 0:
            msg = "patience and cooldown should be non-negative"
            raise ValueError(msg)
        if self.step_size < 1:
            msg = f"step_size should be at least 1, got {self.step_size}"
            raise ValueError(msg)
        object.__setattr__(self, "milestones", tuple(sorted(self.milestones)))


@dataclasses.dataclass
class SchedulerState:
    """Mutable scheduler state."""

    base_lr: float
    lr: float
    step_count: int = 0
    best: float = math.inf
    num_bad: int = 0
    cooldown_counter: int = 0


PRESETS = {
    "dpf-118": {
        "optimizer": OptimizerConfig(kind="adam", lr=0.0034, beta1=0.979, beta2=0.963),
        "scheduler": SchedulerConfig(
            kind="reduce_on_plateau", factor=0.547, patience=41, threshold=0.0673, cooldown=97
        ),
        "max_iter": 1000,
    },
    "dpf-9241": {
        "optimizer": OptimizerConfig(kind="adam", lr=0.0001, beta1=0.979, beta2=0.963),
        "scheduler": SchedulerConfig(
            kind="reduce_on_plateau", factor=0.547, patience=41, threshold=0.0673, cooldown=97
        ),
        "max_iter": 1000,
    },
    "ts-first": {
        "optimizer": OptimizerConfig(kind="adam", lr=0.03564, beta1=0.9802, beta2=0.9440),
        "scheduler": SchedulerConfig(kind="step_lr", step_size=100, gamma=0.773),
        "max_iter": 1000,
    },
    "ts-warm": {
        "optimizer": OptimizerConfig(kind="adam", lr=0.00027, beta1=0.7847, beta2=0.6624),
        "scheduler": SchedulerConfig(kind="reduce_on_plateau", factor=0.8, patience=2, threshold=0.0388, cooldown=4),
        "max_iter": 300,
    },
}


def get_preset(name):
    """
    Look up a named hyperparameter preset.

    Parameters
    ----------
    name : str
        Preset name, one of the keys of `PRESETS`.

    Returns
    -------
    dict
        Keys "optimizer" (OptimizerConfig), "scheduler" (SchedulerConfig) and "max_iter" (int).
    """
    try:
        return PRESETS[name]
    except KeyError:
        msg = f"Unknown preset {name!r}, expected one of {sorted(PRESETS)}"
        raise UnknownPresetError(msg) from None


def init_optimizer_state(config, n_params):
    """
    Create a fresh optimizer state.

    Parameters
    ----------
    config : OptimizerConfig
        Optimizer settings.
    n_params : int
        Length of the parameter vector.

    Returns
    -------
    OptimizerState
        Zeroed state.
    """
    del config
    return OptimizerState(step_count=0, m=np.zeros(n_params), v=np.zeros(n_params))


def optimizer_step(state, config, params, grad, lr):
    """
    Take one optimizer step.

    - Adam: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; p <- p - lr m_hat / (sqrt(v_hat) + eps)
      with bias-corrected m_hat, v_hat.
    - SGD: buf <- momentum buf + g (buf = g on the first step); p <- p - lr buf.
    - RMSprop: v <- alpha v + (1-alpha) g^2; p <- p - lr g / (sqrt(v) + eps).

    Parameters
    ----------
    state : OptimizerState
        Optimizer state, updated in place.
    config : OptimizerConfig
        Optimizer settings.
    params : numpy.ndarray
        Current parameters. Not modified.
    grad : numpy.ndarray
        Gradient at `params`.
    lr : float
        Learning rate of this step.

    Returns
    -------
    numpy.ndarray
        Updated parameters.

    Raises
    ------
    NonFiniteGradientError
        If `grad` contains NaN or infinite values.
    """
    if params.shape != grad.shape or params.shape != state.m.shape:
        msg = f"Length mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        raise ValueError(msg)

    if not np.isfinite(grad).all():
        msg = f"Gradient has {np.count_nonzero(~np.isfinite(grad))} non-finite entries at step {state.step_count}"
        raise NonFiniteGradientError(msg)

    state.step_count += 1
    t = state.step_count

    if config.kind == "adam":
        state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad
        state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
        m_hat = state.m / (1.0 - config.beta1**t)
        v_hat = state.v / (1.0 - config.beta2**t)
        return params - lr * m_hat / (np.sqrt(v_hat) + config.eps)

    if config.kind == "sgd":
        if config.momentum == 0.0:
            return params - lr * grad
        state.buf = grad.copy() if state.buf is None else config.momentum * state.buf + grad
        return params - lr * state.buf

    state.v = config.alpha * state.v + (1.0 - config.alpha) * grad * grad
    return params - lr * grad / (np.sqrt(state.v) + config.eps)


def init_scheduler_state(config, lr):
    """
    Create a fresh scheduler state.

    Parameters
    ----------
    config : SchedulerConfig
        Scheduler settings.
    lr : float
        Initial learning rate.

    Returns
    -------
    SchedulerState
        Fresh state.
    """
    del config
    return SchedulerState(base_lr=lr, lr=lr)


def scheduler_step(state, config, metric):
    """
    Advance the scheduler by one step and return the new learning rate.

    - constant: unchanged.
    - step_lr: lr0 gamma^floor(t / step_size) after t steps.
    - multi_step_lr: lr0 gamma^(number of milestones <= t).
    - reduce_on_plateau: a metric improves when it is below best (1 - threshold).
      When the count of consecutive non-improving evaluations exceeds
      `patience`, lr <- max(lr factor, min_lr) and the next `cooldown`
      evaluations are not counted.

    Parameters
    ----------
    state : SchedulerState
        Scheduler state, updated in place.
    config : SchedulerConfig
        Scheduler settings.
    metric : float
        Monitored quantity (the loss). Only used by reduce_on_plateau.

    Returns
    -------
    float
        Learning rate for the next optimizer step.
    """
    state.step_count += 1
    t = state.step_count

    if config.kind == "step_lr":
        state.lr = state.base_lr * config.gamma ** (t // config.step_size)

    elif config.kind == "multi_step_lr":
        passed = sum(1 for milestone in config.milestones if milestone <= t)
        state.lr = state.base_lr * config.gamma**passed

    elif config.kind == "reduce_on_plateau":
        if not math.isfinite(metric):
            msg = f"Plateau scheduler needs a finite metric, got {metric}"
            raise ValueError(msg)

        if metric < state.best * (1.0 - config.threshold):
            state.best = metric
            state.num_bad = 0
        else:
            state.num_bad += 1

        if state.cooldown_counter > 0:
            state.cooldown_counter -= 1
            state.num_bad = 0

        if state.num_bad > config.patience:
            state.lr = max(state.lr * config.factor, config.min_lr)
            state.cooldown_counter = config.cooldown
            state.num_bad = 0

    return state.lr
