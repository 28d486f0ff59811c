"""Harvester-power forecasting and device-state estimation.

The LSTM is implemented directly in numpy (single layer, dense scalar head,
full-batch Adam on MSE over min-max normalised windows) because the series
involved are tiny and an ecosystem dependency would dominate the artifact.
Persistence and exponentially-weighted baselines run with no training step,
so the simulator works out of the box; the forecaster choice is a config
switch.

State estimation rolls the predicted power through the slotted buffer
recurrence for one beacon interval starting from the device's last reported
energy, then applies the energy threshold.  The rolling accuracy of those
state estimates is the alpha that feeds the beacon-period bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .device import DeviceState, select_device_state
from .energy import EnergyBuffer, HarvesterTrace, advance_buffer


class ForecastError(Exception):
    pass


class InsufficientData(ForecastError):
    """Trace shorter than 10x the window."""


class Divergence(ForecastError):
    """Training loss became non-finite."""


class WrongWindow(ForecastError):
    """History length does not match the model window."""


class ForecastKind(Enum):
    LSTM = "lstm"
    PERSISTENCE = "persistence"
    EWMA = "ewma"


MAX_WINDOW = 10   # at most 10 past time-series samples feed a prediction


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 400
    window: int = 10
    hidden_size: int = 32
    seed: int = 0
    batch_size: int = 32
    validation_fraction: float = 0.2
    # Adam moments, standard defaults
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 1 <= self.window <= MAX_WINDOW:
            raise ValueError(f"window must be in [1, {MAX_WINDOW}]")
        if self.epochs < 1 or self.hidden_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training config")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class LstmParams:
    wx: np.ndarray      # (1, 4H) input weights
    wh: np.ndarray      # (H, 4H) recurrent weights
    b: np.ndarray       # (4H,)
    w_out: np.ndarray   # (H,)
    b_out: float


@dataclass
class ForecastModel:
    kind: ForecastKind
    window: int
    rng_seed: int = 0
    params: LstmParams | None = None
    smoothing: float = 0.5                      # EWMA weight on the newest sample
    norm_min: float = 0.0
    norm_scale: float = 1.0                     # max - min over the training split
    loss_history: list[float] = field(default_factory=list)
    val_loss_history: list[float] = field(default_factory=list)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.norm_min) / self.norm_scale

    def denormalize(self, y: float) -> float:
        return y * self.norm_scale + self.norm_min


def persistence_model(window: int = 1) -> ForecastModel:
    return ForecastModel(kind=ForecastKind.PERSISTENCE, window=window)


def ewma_model(smoothing: float = 0.5, window: int = 4) -> ForecastModel:
    if not 0 < smoothing <= 1:
        raise ValueError("smoothing must be in (0, 1]")
    return ForecastModel(kind=ForecastKind.EWMA, window=window, smoothing=smoothing)


# ---------------------------------------------------------------------------
# LSTM forward / backward
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _forward(params: LstmParams, x: np.ndarray):
    """x: (N, T) normalised inputs.  Returns predictions and the tape."""
    n, t_steps = x.shape
    hidden = params.w_out.shape[0]
    h = np.zeros((n, hidden))
    c = np.zeros((n, hidden))
    tape = []
    for t in range(t_steps):
        xt = x[:, t:t + 1]                     # (N, 1)
        z = xt @ params.wx + h @ params.wh + params.b
        i = _sigmoid(z[:, 0 * hidden:1 * hidden])
        f = _sigmoid(z[:, 1 * hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sigmoid(z[:, 3 * hidden:4 * hidden])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        tape.append((xt, h_prev, c_prev, i, f, g, o, tanh_c))
    y = h @ params.w_out + params.b_out        # (N,)
    return y, h, tape


def _backward(params: LstmParams, x: np.ndarray, y: np.ndarray,
              target: np.ndarray, h_last: np.ndarray, tape):
    n, t_steps = x.shape
    hidden = params.w_out.shape[0]
    d_y = 2.0 * (y - target) / n               # d(MSE)/dy
    grad_w_out = h_last.T @ d_y
    grad_b_out = float(np.sum(d_y))
    d_h = np.outer(d_y, params.w_out)
    d_c = np.zeros((n, hidden))
    grad_wx = np.zeros_like(params.wx)
    grad_wh = np.zeros_like(params.wh)
    grad_b = np.zeros_like(params.b)
    for t in range(t_steps - 1, -1, -1):
        xt, h_prev, c_prev, i, f, g, o, tanh_c = tape[t]
        d_o = d_h * tanh_c
        d_c = d_c + d_h * o * (1.0 - tanh_c ** 2)
        d_i = d_c * g
        d_f = d_c * c_prev
        d_g = d_c * i
        d_z = np.concatenate([
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_g * (1.0 - g ** 2),
            d_o * o * (1.0 - o),
        ], axis=1)
        grad_wx += xt.T @ d_z
        grad_wh += h_prev.T @ d_z
        grad_b += d_z.sum(axis=0)
        d_h = d_z @ params.wh.T
        d_c = d_c * f
    return grad_wx, grad_wh, grad_b, grad_w_out, grad_b_out


def _make_windows(series: np.ndarray, window: int):
    n = len(series) - window
    x = np.stack([series[i:i + window] for i in range(n)])
    y = series[window:]
    return x, y


def train(trace: HarvesterTrace, config: TrainConfig | None = None) -> ForecastModel:
    """Fit the LSTM forecaster on a power trace.  Deterministic per seed."""
    config = config or TrainConfig()
    series = np.asarray(trace.powers, dtype=float)
    if len(series) < 10 * config.window:
        raise InsufficientData(
            f"trace has {len(series)} samples; need >= {10 * config.window}")

    split = max(config.window + 1,
                int(round(len(series) * (1.0 - config.validation_fraction))))
    train_series, val_series = series[:split], series[split - config.window:]

    lo, hi = float(train_series.min()), float(train_series.max())
    scale = hi - lo
    model = ForecastModel(kind=ForecastKind.LSTM, window=config.window,
                          rng_seed=config.seed, norm_min=lo,
                          norm_scale=scale if scale > 1e-12 else 1.0)

    rng = np.random.default_rng(config.seed)
    hidden = config.hidden_size
    k = 1.0 / math.sqrt(hidden)
    params = LstmParams(
        wx=rng.uniform(-k, k, size=(1, 4 * hidden)),
        wh=rng.uniform(-k, k, size=(hidden, 4 * hidden)),
        b=np.zeros(4 * hidden),
        w_out=rng.uniform(-k, k, size=hidden),
        b_out=0.0,
    )
    # forget-gate bias starts open, the usual stabiliser
    params.b[hidden:2 * hidden] = 1.0

    x_train, y_train = _make_windows(model.normalize(train_series), config.window)
    have_val = len(val_series) > config.window
    if have_val:
        x_val, y_val = _make_windows(model.normalize(val_series), config.window)

    m = [np.zeros_like(g) for g in (params.wx, params.wh, params.b, params.w_out)] + [0.0]
    v = [np.zeros_like(g) for g in (params.wx, params.wh, params.b, params.w_out)] + [0.0]
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_train))
        epoch_sse = 0.0
        for lo_i in range(0, len(order), config.batch_size):
            idx_batch = order[lo_i:lo_i + config.batch_size]
            xb, yb = x_train[idx_batch], y_train[idx_batch]
            y_hat, h_last, tape = _forward(params, xb)
            epoch_sse += float(np.sum((y_hat - yb) ** 2))
            grads = _backward(params, xb, y_hat, yb, h_last, tape)
            step += 1
            lr_t = config.learning_rate * math.sqrt(1.0 - config.beta2 ** step) \
                / (1.0 - config.beta1 ** step)
            tensors = [params.wx, params.wh, params.b, params.w_out]
            for idx, grad in enumerate(grads):
                m[idx] = config.beta1 * m[idx] + (1 - config.beta1) * grad
                v[idx] = config.beta2 * v[idx] + (1 - config.beta2) * grad * grad
                if idx < 4:
                    tensors[idx] -= lr_t * m[idx] / (np.sqrt(v[idx]) + config.eps)
                else:
                    params.b_out -= lr_t * m[idx] / (math.sqrt(v[idx]) + config.eps)

        loss = epoch_sse / len(x_train)
        if not math.isfinite(loss):
            raise Divergence(f"training loss non-finite at epoch {epoch}")
        model.loss_history.append(loss)

        if have_val:
            y_v, _, _ = _forward(params, x_val)
            val_loss = float(np.mean((y_v - y_val) ** 2))
            if not math.isfinite(val_loss):
                raise Divergence(f"validation loss non-finite at epoch {epoch}")
            model.val_loss_history.append(val_loss)

    model.params = params
    return model


def predict(model: ForecastModel, history) -> float:
    """One-step-ahead harvester power in mW, clamped at zero."""
    hist = np.asarray(history, dtype=float)
    if hist.shape != (model.window,):
        raise WrongWindow(f"need exactly {model.window} samples, got {hist.shape}")
    if model.kind == ForecastKind.PERSISTENCE:
        return max(0.0, float(hist[-1]))
    if model.kind == ForecastKind.EWMA:
        s = float(hist[0])
        for val in hist[1:]:
            s = model.smoothing * float(val) + (1.0 - model.smoothing) * s
        return max(0.0, s)
    if model.params is None:
        raise ForecastError("LSTM model is untrained")
    y, _, _ = _forward(model.params, model.normalize(hist)[None, :])
    return max(0.0, model.denormalize(float(y[0])))


def one_step_predictions(model: ForecastModel, series) -> tuple[np.ndarray, np.ndarray]:
    """(predicted, actual) pairs over every full window in ``series``."""
    arr = np.asarray(series, dtype=float)
    if len(arr) <= model.window:
        raise WrongWindow("series shorter than one window")
    preds = np.array([predict(model, arr[i:i + model.window])
                      for i in range(len(arr) - model.window)])
    return preds, arr[model.window:]


def rmse(predicted: np.ndarray, actual: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(predicted) - np.asarray(actual)) ** 2)))


# ---------------------------------------------------------------------------
# Device-state estimation and the rolling accuracy alpha
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateEstimateParams:
    """What the aggregator knows about a device for state estimation."""

    buffer: EnergyBuffer          # central-equivalent storage (summed capacitance)
    threshold_j: float
    slot_s: float
    last_energy_j: float          # most recent piggy-backed energy report
    interval_s: float             # one beacon interval


@dataclass(frozen=True)
class StateEstimate:
    predicted_power_mw: float
    predicted_state: DeviceState
    alpha: float


def estimate_state(predicted_power_mw: float, params: StateEstimateParams) -> DeviceState:
    """Roll predicted power forward one beacon interval, then threshold."""
    n_slots = max(1, int(round(params.interval_s / params.slot_s)))
    start = params.buffer.with_energy(max(0.0, params.last_energy_j))
    res = advance_buffer(start, max(0.0, predicted_power_mw), params.slot_s, n_slots)
    return select_device_state(res.energy, params.threshold_j)


def update_alpha(estimate_log, horizon: int = 100) -> float:
    """Fraction of correct state estimates over the rolling horizon."""
    if not estimate_log:
        raise ValueError("estimate log is empty")
    recent = list(estimate_log)[-horizon:]
    hits = sum(1 for predicted, actual in recent if predicted == actual)
    return hits / len(recent)
