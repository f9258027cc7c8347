"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from sanet import tensor as T
from sanet.tensor import Tensor

EPS = 1e-5
TOL = 1e-5
FLOOR = 1e-4


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def gradcheck(fn, inputs: dict[str, np.ndarray], n_coords: int = 100, seed: int = 0,
              eps: float = EPS, names=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps a dict of tensors to a scalar tensor. ``n_coords`` coordinates
    are sampled across the inputs listed in ``names`` (all by default); every
    coordinate is checked when there are fewer.
    """
    names = list(names or inputs)
    tensors = {k: Tensor(v, requires_grad=k in names) for k, v in inputs.items()}
    out = fn(tensors)
    T.backward(out)
    analytic = {k: (tensors[k].grad if tensors[k].grad is not None else np.zeros(inputs[k].shape))
                for k in names}

    coords = [(k, i) for k in names for i in range(inputs[k].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        # keep every block represented, then fill at random
        first = {k: (k, int(rng.integers(inputs[k].size))) for k in names}
        rest = [coords[i] for i in rng.choice(len(coords), n_coords - len(first), replace=False)]
        coords = list(first.values()) + rest

    def value(k, i, delta):
        arrays = {key: np.array(v, dtype=np.float64) for key, v in inputs.items()}
        arrays[k].reshape(-1)[i] += delta
        return fn({key: Tensor(v) for key, v in arrays.items()}).item()

    worst = 0.0
    for k, i in coords:
        numeric = (value(k, i, eps) - value(k, i, -eps)) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[k].reshape(-1)[i]), numeric))
    return worst


def random_inputs(seed: int, **shapes) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {k: rng.uniform(-1, 1, s) for k, s in shapes.items()}


def naive_metrics(y, yhat, z0_cells, threshold=0.1):
    """Deliberately plain loop reference for MAE, MAPE, MPE and the MPE gap.

    ``y``/``yhat`` are (T, M, N) nested sequences; ``z0_cells`` is a set of
    (row, col) pairs forming the disadvantaged group.
    """
    steps, rows, cols = len(y), len(y[0]), len(y[0][0])
    abs_total = 0.0
    for t in range(steps):
        for r in range(rows):
            for c in range(cols):
                abs_total += abs(y[t][r][c] - yhat[t][r][c])
    result = {"mae": abs_total / (steps * rows * cols)}

    def two_stage(cells, signed):
        per_step = []
        for t in range(steps):
            total, count = 0.0, 0
            for r in range(rows):
                for c in range(cols):
                    if (r, c) in cells and y[t][r][c] > threshold:
                        e = (y[t][r][c] - yhat[t][r][c]) / y[t][r][c]
                        total += e if signed else abs(e)
                        count += 1
            if count:
                per_step.append(total / count)
        return sum(per_step) / len(per_step) if per_step else float("nan")

    every = {(r, c) for r in range(rows) for c in range(cols)}
    result["mape"] = two_stage(every, False)
    result["mpe"] = two_stage(every, True)
    result["mpe_z0"] = two_stage(z0_cells, True)
    result["mpe_z1"] = two_stage(every - z0_cells, True)
    result["gap"] = result["mpe_z0"] - result["mpe_z1"]
    return result


def naive_morans_i(field):
    rows, cols = len(field), len(field[0])
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    values = [field[r][c] for r, c in cells]
    mean = sum(values) / len(values)
    num, wsum = 0.0, 0.0
    for a, (r1, c1) in enumerate(cells):
        for b, (r2, c2) in enumerate(cells):
            if abs(r1 - r2) + abs(c1 - c2) == 1:
                wsum += 1
                num += (values[a] - mean) * (values[b] - mean)
    den = sum((v - mean) ** 2 for v in values)
    return len(values) / wsum * num / den
