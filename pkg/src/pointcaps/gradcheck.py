"""Central finite-difference checks for tape gradients."""

import numpy as np

from . import tensor as T


def relative_error(a, b, floor=1e-12):
    """||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(f, arrays, h=1e-5):
    """Entrywise central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = f()
            arr[i] = old - h
            down = f()
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_op(fn, arrays, seed=0, h=1e-5):
    """Largest relative error between tape and numeric gradients of ``sum(fn(*x) * R)``.

    ``R`` is a fixed random projection so non-scalar ops are fully exercised.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
        proj = rng.normal(size=out.shape)
        loss = T.tsum(out * proj)
    tape.backward(loss)

    def f():
        return float((fn(*[T.Tensor(a) for a in arrays]).data * proj).sum())

    numeric = numeric_gradient(f, arrays, h)
    return max(relative_error(leaf.grad if leaf.grad is not None else np.zeros_like(a), num)
               for leaf, a, num in zip(leaves, arrays, numeric))


def check_directional(loss_fn, params, seed=0, h=1e-5, atol=1e-6, branch=None, redraws=10,
                      stats=None, richardson=False):
    """Per-parameter directional derivative check.

    For each parameter tensor a random unit direction ``u`` is drawn and
    ``<grad, u>`` is compared with ``(L(p + h u) - L(p - h u)) / 2h``.
    ``loss_fn()`` must build the loss from the current parameter data.
    The error is ``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps
    structurally zero derivatives (a bias feeding batch norm) from turning
    finite-difference round-off into a large relative error.

    A piecewise-smooth loss has no derivative to compare against where the
    probe straddles a kink. ``branch()``, if given, returns an array naming
    the active piece (nearest-neighbour indices, hinge activity, ...); a
    direction whose two probes land on different pieces is redrawn, up to
    ``redraws`` times. Redraw counts go to ``stats[name]`` when ``stats`` is
    a dict.

    ``richardson`` replaces the difference quotient ``D(h)`` by
    ``(4 D(h/2) - D(h)) / 3``, cancelling the ``h**2`` truncation term for
    losses that curve sharply on the scale of ``h``.
    Returns ``{name: relative error}``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    errors = {}
    for k, p in enumerate(params):
        name = p.name or str(k)
        base = p.data.copy()
        steps = (h, h / 2) if richardson else (h,)
        for attempt in range(redraws + 1):
            u = rng.normal(size=p.shape)
            u /= np.linalg.norm(u)
            quotients, keys = [], []
            for step in steps:
                p.data = base + step * u
                up = loss_fn().item()
                keys.append(branch() if branch is not None else None)
                p.data = base - step * u
                down = loss_fn().item()
                keys.append(branch() if branch is not None else None)
                quotients.append((up - down) / (2 * step))
            p.data = base
            if branch is None or all(np.array_equal(keys[0], k) for k in keys[1:]):
                break
        if stats is not None:
            stats[name] = attempt
        analytic = float((p.grad * u).sum()) if p.grad is not None else 0.0
        numeric = (4 * quotients[1] - quotients[0]) / 3 if richardson else quotients[0]
        errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
    return errors
