"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NonScalarLossError, Tensor, backward, default_dtype, no_grad, oracle_dtype, reset_tape

DEFAULT_STEP = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-6}
# Step for the Richardson scheme; its O(h^4) truncation lets the step grow until
# roundoff in the loss value stops dominating small gradient components.
RICHARDSON_STEP = {np.dtype(np.float32): 3e-2, np.dtype(np.float64): 1e-3}
THRESHOLD = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def _as_named(x) -> dict[str, Tensor]:
    if isinstance(x, Tensor):
        return {"x": x}
    if isinstance(x, Mapping):
        return dict(x)
    return {str(i): t for i, t in enumerate(x)}


def _mirror(x, named: dict[str, Tensor], dtype):
    """Copy of ``x`` (same structure) with every tensor cast to ``dtype``."""
    cast = {k: Tensor(t.data.astype(dtype), dtype=dtype) for k, t in named.items()}
    if isinstance(x, Tensor):
        return cast["x"], cast
    if isinstance(x, Mapping):
        return cast, cast
    return [cast[str(i)] for i in range(len(cast))], cast


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def _scalar(out: Tensor):
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out))
        raise NonScalarLossError(f"function under check must return a scalar Tensor, got {shape}")
    return out.data.reshape(-1)[0]


def grad_errors(
    f: Callable,
    x,
    h: float | None = None,
    *,
    max_coords: int | None = None,
    seed: int = 0,
    scheme: str = "central",
    oracle: bool = False,
) -> dict[str, float]:
    """Max relative error per input tensor.

    ``x`` is a Tensor, a sequence of Tensors, or a name->Tensor mapping; ``f``
    is called with ``x`` exactly as given and must return a scalar Tensor.
    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are differenced (all of them when the tensor is smaller).

    ``scheme="richardson"`` combines central differences at ``h`` and ``h/2``
    as ``(4*D(h/2) - D(h)) / 3``. ``h`` may be a name->step mapping.

    With ``oracle=True`` the differences are taken on copies of the inputs in
    the next wider float type (f32 -> f64, f64 -> extended), so the reference
    resolves gradient components far below the working precision's roundoff
    floor. The analytic gradient is still computed in the working dtype.
    """
    if scheme not in ("central", "richardson"):
        raise ValueError(f"unknown scheme {scheme!r}")
    named = _as_named(x)
    saved_flags = {k: t.requires_grad for k, t in named.items()}
    for t in named.values():
        t.requires_grad = True
        t.grad = None
    try:
        reset_tape()
        out = f(x)
        _scalar(out)
        backward(out)
        analytic = {k: np.zeros_like(t.data) if t.grad is None else t.grad.copy() for k, t in named.items()}
        rng = np.random.default_rng(seed)
        errors = {}
        if oracle:
            odt = oracle_dtype(next(iter(named.values())).dtype)
            x_eval, named_eval = _mirror(x, named, odt)
        else:
            odt, x_eval, named_eval = None, x, named
        for name, t in named.items():
            if isinstance(h, Mapping) and name in h:
                step = h[name]
            elif h is not None and not isinstance(h, Mapping):
                step = h
            else:
                step = (RICHARDSON_STEP if scheme == "richardson" else DEFAULT_STEP)[t.dtype]
            flat = named_eval[name].data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size, dtype=np.longdouble)

            def central(c, s):
                orig = flat[c]
                flat[c] = orig + s
                fp = _scalar(f(x_eval))
                flat[c] = orig - s
                fm = _scalar(f(x_eval))
                flat[c] = orig
                return (fp - fm) / (2 * s)

            with no_grad(), default_dtype(odt or t.dtype):
                for j, c in enumerate(coords):
                    if scheme == "central":
                        numeric[j] = central(c, step)
                    else:
                        numeric[j] = (4 * central(c, step / 2) - central(c, step)) / 3
            a = analytic[name].reshape(-1)[coords].astype(np.float64)
            errors[name] = float(relative_error(a, numeric).max()) if coords.size else 0.0
        return errors
    finally:
        for k, t in named.items():
            t.requires_grad = saved_flags[k]


def finite_diff_check(f: Callable, x, h: float | None = None, **kw) -> float:
    """Max over coordinates of ``|analytic - cd| / (|analytic| + |cd| + 1e-12)``."""
    return max(grad_errors(f, x, h, **kw).values())


def random_projection_loss(out: Tensor, seed: int = 1234) -> Tensor:
    """``sum(out * R)`` for a fixed random ``R``; avoids structurally zero gradients of plain sums."""
    r = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return (out * Tensor(r, dtype=out.dtype)).sum()

