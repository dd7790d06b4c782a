"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import zlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad


class KinkDetected(ArithmeticError):
    """The probed point sits too close to a non-differentiable kink."""


def _as_list(inputs) -> list[Tensor]:
    return [inputs] if isinstance(inputs, Tensor) else list(inputs)


def analytic_grads(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]


def _evaluate(f, inputs) -> float:
    with no_grad():
        return float(f(*inputs).data.reshape(-1)[0])


def gradcheck(f: Callable[..., Tensor], inputs: Union[Tensor, Sequence[Tensor]],
              eps: float = 1e-5, coords: Optional[Sequence[tuple[int, int]]] = None,
              kink_tol: Optional[float] = None) -> float:
    """Return the max relative error between analytic and numeric gradients.

    The error at each coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)`` with the
    numeric value taken from a central difference of width ``2*eps``.

    ``coords`` restricts the check to ``(input_index, flat_index)`` pairs.
    With ``kink_tol`` set, a coordinate whose one-sided slopes disagree by
    more than ``kink_tol`` raises :class:`KinkDetected` so the caller can
    resample; this is how ReLU kinks are kept out of the comparison.
    """
    inputs = _as_list(inputs)
    grads = analytic_grads(f, inputs)
    if coords is None:
        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    worst = 0.0
    base = _evaluate(f, inputs) if kink_tol is not None else None
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = _evaluate(f, inputs)
        flat[j] = orig - eps
        down = _evaluate(f, inputs)
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        if base is not None:
            right, left = (up - base) / eps, (base - down) / eps
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                raise KinkDetected(f"input {i} coordinate {j}: slopes {left:.3e} vs {right:.3e}")
        analytic = grads[i].reshape(-1)[j]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst


def gradcheck_resampled(f: Callable[..., Tensor], sample: Callable[[np.random.Generator], list[Tensor]],
                        rng: np.random.Generator, eps: float = 1e-5,
                        kink_tol: float = 1e-3, max_tries: int = 20) -> float:
    """Run :func:`gradcheck` at a random point, redrawing when a kink is hit."""
    for _ in range(max_tries):
        inputs = sample(rng)
        try:
            return gradcheck(f, inputs, eps=eps, kink_tol=kink_tol)
        except KinkDetected:
            continue
    raise KinkDetected(f"no kink-free point found in {max_tries} draws")


# -- the battery ---------------------------------------------------------------------

def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random weighting exposes every output element's gradient
    return ops.sum(ops.mul(out, Tensor(w)))


def _case(build, shapes_fn):
    """Bundle a scalarised primitive with a sampler of fresh inputs."""
    def sample(rng):
        ins = [_t(rng, *s) for s in shapes_fn()]
        probe = build(*ins)
        w = rng.standard_normal(probe.shape)
        return ins, (lambda *xs: _weighted(build(*xs), w))
    return sample


def _bn_case(training: bool):
    def sample(rng):
        x, g, b = _t(rng, 4, 3, 6, 6), _t(rng, 3), _t(rng, 3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        w = rng.standard_normal(x.shape)

        def f(x, g, b):
            # fresh buffer copies keep repeated evaluations identical
            return _weighted(ops.batch_norm(x, rm.copy(), rv.copy(), g, b, training), w)
        return [x, g, b], f
    return sample


def _target_case(loss, k: int):
    def sample(rng):
        z = _t(rng, 5, k)
        t = rng.integers(0, 2 if loss is ops.binary_cross_entropy else k, 5)
        return [z], (lambda z: loss(z, t))
    return sample


PRIMITIVES = {
    "add": _case(ops.add, lambda: [(3, 4), (3, 4)]),
    "add_scalar": _case(ops.add, lambda: [(3, 4), (1,)]),
    "scale": _case(lambda a: ops.scale(a, 1.7), lambda: [(3, 4)]),
    "mul": _case(ops.mul, lambda: [(3, 4), (3, 4)]),
    "sum": _case(lambda a: ops.reshape(ops.sum(a), (1,)), lambda: [(3, 4)]),
    "mean": _case(lambda a: ops.reshape(ops.mean(a), (1,)), lambda: [(3, 4)]),
    "reshape": _case(lambda a: ops.reshape(a, (4, 3)), lambda: [(3, 4)]),
    "flatten": _case(ops.flatten, lambda: [(2, 3, 2, 2)]),
    "transpose": _case(lambda a: ops.transpose(a, (1, 2, 0)), lambda: [(2, 3, 4)]),
    "relu": _case(ops.relu, lambda: [(3, 5)]),
    "conv2d": _case(lambda x, w, b: ops.conv2d(x, w, b, 1, 1),
                    lambda: [(1, 2, 5, 5), (2, 2, 3, 3), (2,)]),
    "conv2d_stride2": _case(lambda x, w: ops.conv2d(x, w, None, 2, 1),
                            lambda: [(2, 2, 6, 6), (3, 2, 3, 3)]),
    "conv3d": _case(lambda x, w, b: ops.conv3d(x, w, b, 1, 1),
                    lambda: [(1, 2, 3, 4, 4), (2, 2, 3, 3, 3), (2,)]),
    "batch_norm_train": _bn_case(True),
    "batch_norm_eval": _bn_case(False),
    "avg_pool2d": _case(lambda x: ops.avg_pool(x, 2), lambda: [(2, 2, 5, 5)]),
    "avg_pool3d": _case(lambda x: ops.avg_pool(x, 3), lambda: [(1, 2, 3, 6, 4)]),
    "adaptive_avg_pool": _case(ops.adaptive_avg_pool_to_one, lambda: [(2, 3, 3, 4)]),
    "dense": _case(ops.dense, lambda: [(4, 6), (3, 6), (3,)]),
    "softmax": _case(ops.softmax, lambda: [(4, 5)]),
    "cross_entropy": _target_case(ops.cross_entropy, 4),
    "binary_cross_entropy": _target_case(ops.binary_cross_entropy, 2),
    "mse": _case(lambda p, q: ops.reshape(ops.mse(p, q), (1,)), lambda: [(3, 4), (3, 4)]),
}


def check_primitive(name: str, trials: int = 100, seed: int = 0, eps: float = 1e-5,
                    kink_tol: float = 1e-3, max_tries: int = 20) -> float:
    """Worst relative error of one primitive over ``trials`` random points."""
    sample = PRIMITIVES[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    worst = 0.0
    for _ in range(trials):
        for _ in range(max_tries):
            inputs, f = sample(rng)
            try:
                worst = max(worst, gradcheck(f, inputs, eps=eps, kink_tol=kink_tol))
                break
            except KinkDetected:
                continue
        else:
            raise KinkDetected(f"{name}: no kink-free point in {max_tries} draws")
    return worst


def end_to_end_check(n_params: int = 50, seed: int = 0, eps: float = 1e-4,
                     width: float = 1 / 8, lam: float = 0.5,
                     kink_tol: float = 1e-2, max_tries: int = 1000) -> float:
    """Combined hybrid loss against central differences on random parameter coordinates.

    A toy batch of four 16x16 images and 3-slice volumes drives the whole
    hybrid model in training mode. Coordinates whose one-sided slopes
    disagree (a ReLU kink inside the stencil) are skipped and redrawn.
    """
    from .augment import build_volume_batch, default_roster
    from .model import (HybridModel, ThreeDNetConfig, TwoDNetConfig, build_three_d,
                        build_two_d, hybrid_forward)
    from .training import combined_loss

    rng = np.random.default_rng(seed)
    model = HybridModel(build_two_d(TwoDNetConfig(width_multiplier=width), seed),
                        build_three_d(ThreeDNetConfig(num_classes=4, width_multiplier=width),
                                      seed))
    images = rng.uniform(0, 1, (4, 3, 16, 16))
    vols = build_volume_batch(images, range(4), default_roster(3), seed, 0)
    targets = np.array([0, 1, 2, 3])
    params = model.parameters()

    def f(*_):
        return combined_loss(hybrid_forward(model, images, vols, True), targets, lam).total

    sizes = np.array([p.size for p in params])
    checked, worst, tries = 0, 0.0, 0
    while checked < n_params:
        tries += 1
        if tries > max_tries:
            raise KinkDetected(f"only {checked} kink-free coordinates in {max_tries} draws")
        # size-weighted draw so every scalar parameter is equally likely
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = int(rng.integers(params[i].size))
        try:
            worst = max(worst, gradcheck(f, params, eps=eps, coords=[(i, j)],
                                         kink_tol=kink_tol))
        except KinkDetected:
            continue
        checked += 1
    return worst


def run_battery(trials: int = 100, threshold: float = 1e-6, e2e_threshold: float = 1e-4,
                seed: int = 0, names: Optional[Sequence[str]] = None) -> list[dict]:
    """Every primitive plus the end-to-end loss; one result dict per check."""
    results = []
    for name in names or PRIMITIVES:
        err = check_primitive(name, trials, seed)
        results.append({"check": name, "max_rel_error": err, "threshold": threshold,
                        "passed": bool(err < threshold)})
    err = end_to_end_check(seed=seed)
    results.append({"check": "combined_loss_end_to_end", "max_rel_error": err,
                    "threshold": e2e_threshold, "passed": bool(err < e2e_threshold)})
    return results
