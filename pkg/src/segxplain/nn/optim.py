"""Adam/SGD parameter updates and the reduce-on-plateau learning-rate rule."""

import numpy as np


class TrainingError(RuntimeError):
    pass


class OptimizerState:
    """Per-parameter moment accumulators plus the current learning rate.

    ``mode='adam'`` keeps first/second moments with bias correction;
    ``mode='sgd'`` is the plain w -= lr*g update used by analytic tests.
    """

    def __init__(self, parameters, learning_rate, mode="adam",
                 beta1=0.9, beta2=0.999, epsilon=1e-7):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.learning_rate = float(learning_rate)
        self.mode = mode
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = {}
        self.v = {}
        if mode == "adam":
            for p in parameters:
                if p.trainable:
                    self.m[p.name] = np.zeros_like(p.array)
                    self.v[p.name] = np.zeros_like(p.array)


def optimizer_step(parameters, grads, state):
    """Apply one update in place; frozen parameters and buffers are untouched.

    Every trainable parameter must have a finite gradient present in
    ``grads``; a NaN/inf gradient raises TrainingError naming the parameter.
    """
    trainable = [p for p in parameters if p.trainable]
    for p in trainable:
        if p.name not in grads:
            raise TrainingError(f"missing gradient for parameter {p.name}")
        if not np.all(np.isfinite(grads[p.name])):
            raise TrainingError(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    lr = state.learning_rate
    if state.mode == "sgd":
        for p in trainable:
            p.array = p.array - (lr * grads[p.name]).astype(p.array.dtype)
        return parameters, state
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for p in trainable:
        g = grads[p.name].astype(np.float64)
        if p.name not in state.m:  # parameter unfrozen after state creation
            state.m[p.name] = np.zeros_like(p.array)
            state.v[p.name] = np.zeros_like(p.array)
        m = b1 * state.m[p.name] + (1 - b1) * g
        v = b2 * state.v[p.name] + (1 - b2) * g * g
        state.m[p.name] = m.astype(p.array.dtype)
        state.v[p.name] = v.astype(p.array.dtype)
        update = lr * (m / correct1) / (np.sqrt(v / correct2) + state.epsilon)
        p.array = (p.array - update).astype(p.array.dtype)
    return parameters, state


class PlateauSchedule:
    """Halve the learning rate after ``patience`` consecutive non-improving
    validation epochs; the counter resets after each reduction."""

    def __init__(self, initial_lr, patience=3, factor=0.5, min_lr=1e-6,
                 min_delta=0.0):
        self.learning_rate = float(initial_lr)
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale_epochs = 0
        self.history = []

    def update(self, epoch_val_loss) -> float:
        self.history.append(float(epoch_val_loss))
        if epoch_val_loss < self.best - self.min_delta:
            self.best = float(epoch_val_loss)
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
            if self.stale_epochs >= self.patience:
                self.learning_rate = max(self.learning_rate * self.factor,
                                         self.min_lr)
                self.stale_epochs = 0
        return self.learning_rate


def plateau_update(schedule, epoch_val_loss) -> float:
    """Record one epoch's validation loss; returns the (possibly halved) lr."""
    return schedule.update(epoch_val_loss)
