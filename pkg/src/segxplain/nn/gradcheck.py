"""Central finite-difference validation of the reverse pass."""

import numpy as np

from segxplain.nn.layers import backward, forward
from segxplain.rng import derive_rng


def check_gradients(network, input_tensor, loss_fn, eps: float,
                    forward_seed: int = 0) -> float:
    """Max relative error between analytic and numeric parameter gradients.

    ``loss_fn`` maps the forward output array to ``(loss, dloss/doutput)``.
    Every forward pass reuses the same dropout stream (``forward_seed``) so
    the finite differences probe a fixed function. Returns 0.0 for networks
    without trainable parameters.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    def run():
        out, tape = forward(network, input_tensor, mode="train",
                            rng=derive_rng(forward_seed, "gradcheck"))
        return out.array, tape

    params = network.trainable_parameters()
    if not params:
        return 0.0

    out, tape = run()
    _, gout = loss_fn(out)
    analytic = backward(tape, gout)

    worst = 0.0
    for p in params:
        flat = p.array.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            plus, _ = loss_fn(run()[0])
            flat[k] = orig - eps
            minus, _ = loss_fn(run()[0])
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * eps)
            a = float(a_flat[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def sum_of_squares_loss(out: np.ndarray):
    """Generic smooth test objective: L = 0.5*sum(y^2), dL/dy = y."""
    return 0.5 * float((out.astype(np.float64) ** 2).sum()), out
