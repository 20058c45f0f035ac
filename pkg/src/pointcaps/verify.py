"""Self-verification battery: gradient checks, routing oracles and invariants.

Each check returns a :class:`CheckResult`; :func:`run_checks` times them.
``seeds`` scales the randomized checks (100 gives the full release gate).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import reference as ref
from . import routing
from . import tensor as T
from .config import ModelConfig
from .gradcheck import check_directional, check_op
from .layers import digitcap, mask_activity, pointcap_a, pointcap_b, pointcap_c
from .losses import margin_loss, total_loss
from .model import PointCapsNet, count_params_flops, layer_costs


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rand(rng, shape):
    return rng.normal(size=shape)


OP_CASES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / (T.square(b) + 1.0), [(2, 3), (3,)]),
    "sqrt": (lambda a: T.sqrt(T.square(a) + 0.5), [(5,)]),
    "exp": (T.exp, [(4,)]),
    "swish": (T.swish, [(6,)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 4)]),
    "squash": (T.squash, [(3, 5)]),
    "norm": (T.vector_norm, [(3, 5)]),
    "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "matmul": (T.matmul, [(2, 3, 4), (4, 5)]),
    "einsum": (lambda a, b: T.einsum("bid,iade->biae", a, b), [(2, 3, 4), (3, 2, 4, 5)]),
    "conv1d": (T.conv1d_feature, [(2, 3, 4), (5, 1, 4), (5,)]),
    "conv2d": (lambda a, k: T.conv2d_strided(a, k, 4), [(2, 8, 1), (3, 1, 4)]),
    "deconv": (lambda a, w, b: T.deconv_width(a, w, 4, b), [(2, 3, 2), (2, 4, 3), (3,)]),
    "chamfer": (T.chamfer, [(2, 6, 3), (2, 5, 3)]),
}

LAYER_CASES = {
    "pointcap_a_er": (lambda x, k, b: pointcap_a(x, k, b, 2, 3, iterations=3)[0],
                      [(4, 5), (6, 1, 5), (6,)]),
    "pointcap_a_dr": (lambda x, k, b: pointcap_a(x, k, b, 2, 3, routing="DR", iterations=2)[0],
                      [(4, 5), (6, 1, 5), (6,)]),
    "pointcap_b": (lambda x, k, b: pointcap_b(x, k, b, 2, 2)[0], [(2, 3, 4), (4, 1, 4), (4,)]),
    "pointcap_c": (lambda x, k, b: pointcap_c(x, k, b, 2, 3), [(2, 2, 3), (6, 1, 6), (6,)]),
    "digitcap": (lambda x, w: digitcap(x, w)[0], [(4, 3), (4, 2, 3, 4)]),
    "mask": (lambda d: mask_activity(d, np.array([1, 0])), [(2, 3, 4)]),
    "margin_loss": (lambda v: margin_loss(T.sigmoid(v), np.array([0, 2])), [(2, 3)]),
}


def _gradient_table(cases, seeds, tol):
    worst = {}
    for name, (fn, shapes) in cases.items():
        errs = []
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            errs.append(check_op(fn, [_rand(rng, s) for s in shapes], seed=seed))
        worst[name] = max(errs)
    bad = {k: v for k, v in worst.items() if not v < tol}
    detail = f"worst {max(worst.values()):.2e} over {len(cases)} cases x {seeds} seeds"
    if bad:
        detail += "; failing " + ", ".join(f"{k}={v:.2e}" for k, v in sorted(bad.items()))
    return not bad, detail


def check_op_gradients(seeds=100, tol=1e-5):
    return _gradient_table(OP_CASES, seeds, tol)


def check_layer_gradients(seeds=100, tol=1e-5):
    return _gradient_table(LAYER_CASES, seeds, tol)


def branch_tracking_loss(model, x, y):
    """``(loss_fn, branch)`` for the training loss of ``model`` on ``(x, y)``.

    ``branch()`` returns the discrete state seen by the latest ``loss_fn()``
    call: Chamfer nearest-neighbour pairings and the active margin hinges.
    """
    cfg = model.config
    present = np.eye(cfg.num_classes, dtype=bool)[y]
    state = {}

    def loss_fn():
        out = model.forward(x, y, training=True, update_stats=False)
        rec = out.reconstruction.data
        d2 = ((x[:, :, None, :3] - rec[:, None, :, :]) ** 2).sum(-1)
        lengths = out.class_lengths.data
        hinge = np.where(present, lengths < cfg.m_pos, lengths > cfg.m_neg)
        state["key"] = np.concatenate([d2.argmin(-1).ravel(), d2.argmin(-2).ravel(), hinge.ravel()])
        return total_loss(out.class_lengths, y, T.Tensor(x[..., :3]), out.reconstruction,
                          cfg.gamma, cfg.m_pos, cfg.m_neg, cfg.lam)[0]

    return loss_fn, lambda: state["key"]


def check_end_to_end_gradient(seeds=100, tol=1e-4, atol=1e-4):
    """Directional derivative check of every parameter of the micro model.

    Probes that straddle a Chamfer re-pairing or a margin hinge are redrawn.
    Differences are Richardson-extrapolated: capsules whose pre-squash norm
    sits near the squash guard curve on a scale close to the step. ``atol``
    is the derivative size below which the error is effectively absolute
    (``tol * atol``), well above the round-off of the difference quotients.
    """
    worst, where, redrawn = 0.0, "", 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        model = PointCapsNet(ModelConfig.tiny(), seed=seed)
        model.calibrate(rng.normal(size=(8, 32, 3)) * 0.5)
        # four clouds: batch norm over two samples is a smoothed sign function
        x = rng.normal(size=(4, 32, 3)) * 0.5
        y = rng.integers(0, 2, size=4)
        loss_fn, branch = branch_tracking_loss(model, x, y)
        stats = {}
        errors = check_directional(loss_fn, model.parameters(), seed=seed, atol=atol,
                                   branch=branch, stats=stats, richardson=True)
        redrawn += sum(stats.values())
        name = max(errors, key=errors.get)
        if errors[name] >= worst:
            worst, where = errors[name], f"{name} (seed {seed})"
    return worst < tol, f"worst {worst:.2e} at {where}; {redrawn} kink-straddling probes redrawn"


def check_routing_oracle(samples=200, tol=1e-12, seed=0):
    """Vectorised routers against the scalar-loop reference."""
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for i in range(samples):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
        iters = int(rng.integers(1, 5))
        votes = rng.normal(size=shape)
        for kind in (routing.EUCLIDEAN, routing.DYNAMIC):
            got = routing.route(votes, kind, iters)
            parents, logits, couplings = ref.route(votes, iters, kind)
            err = max(np.max(np.abs(got.parents.data - parents)),
                      np.max(np.abs(got.logits.data - logits)),
                      np.max(np.abs(got.couplings.data - couplings)))
            if err >= worst:
                worst, where = err, f"{kind} {shape} x{iters} (sample {i})"
    return worst < tol, f"max abs diff {worst:.2e} at {where}"


def check_analytic_values():
    failures = []
    for n, want in ((0.0, 0.0), (1.0, 0.5), (3.0, 0.9)):
        got = float(np.linalg.norm(T.squash(np.array([n, 0.0, 0.0])).data))
        if abs(got - want) > 1e-9:
            failures.append(f"squash norm {n} -> {got}")
    cd = T.chamfer(np.zeros((1, 3)), np.array([[1.0, 2.0, -1.0]])).item()
    if cd != 2 * 6.0:
        failures.append(f"singleton chamfer {cd}")
    for lengths, label, want in (([0.9, 0.1, 0.1], 0, 0.0), ([0.0, 0.0], 1, 0.81), ([0.5, 0.5], 0, 0.24)):
        got = margin_loss(np.array(lengths), np.array(label)).item()
        if abs(got - want) > 1e-12:
            failures.append(f"margin {lengths} -> {got}")
    for cfg in (ModelConfig(), ModelConfig.desk(), ModelConfig.tiny()):
        # PointCapB: strip width c_in * d_in, kernel = stride = d_in -> c_in positions
        width = cfg.pcc_caps * cfg.pcc_dim
        if T.conv_output_width(width, cfg.pcc_dim, cfg.pcc_dim) != cfg.pcc_caps:
            failures.append(f"strided width for pcc {cfg.pcc_caps}x{cfg.pcc_dim}")
        if T.conv_output_width(cfg.num_points, 1, 1) != cfg.num_points:
            failures.append("pointwise width")
    return not failures, "; ".join(failures) or "squash, chamfer, margin and width identities hold"


def check_logit_range(pairs=1000, seed=0):
    """One-step increments on unit votes/parents: DR in [-1, 1], ER <= 0, ER < -1 at scale 10."""
    rng = np.random.default_rng(seed)
    # one child, ``pairs`` parents: vote j only meets parent j
    v = rng.normal(size=(1, pairs, 8))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    p = rng.normal(size=(pairs, 8))
    p /= np.linalg.norm(p, axis=-1, keepdims=True)
    failures = []
    (dr_lo, dr_hi), (_, er_hi) = routing.dissimilarity_range_probe(v, p)
    if not (-1 - 1e-12 <= dr_lo and dr_hi <= 1 + 1e-12):
        failures.append(f"DR increments span [{dr_lo:.3f}, {dr_hi:.3f}]")
    if er_hi > 0:
        failures.append(f"ER increment {er_hi:.3g} > 0")
    _, (er_lo, _) = routing.dissimilarity_range_probe(10 * v, p)
    if not er_lo < -1:
        failures.append("no ER increment below -1 at scale 10")
    detail = f"{pairs} pairs: DR [{dr_lo:.3f}, {dr_hi:.3f}], ER max {er_hi:.3f}, scaled ER min {er_lo:.1f}"
    return not failures, "; ".join(failures) or detail


def check_permutation_invariance(perms=50, tol=1e-9, seed=0):
    rng = np.random.default_rng(seed)
    model = PointCapsNet(ModelConfig.tiny(), seed=seed)
    model.calibrate(rng.normal(size=(4, 32, 3)) * 0.5)
    x = rng.normal(size=(32, 3)) * 0.5
    base = model.encode(x).lengths.data
    worst = max(np.max(np.abs(model.encode(x[rng.permutation(32)]).lengths.data - base))
                for _ in range(perms))
    return worst < tol, f"max length change {worst:.2e} over {perms} permutations"


def check_cost_accounting():
    failures = []
    for cfg in (ModelConfig(), ModelConfig.desk(), ModelConfig.tiny(num_classes=4, num_points=64)):
        params, _ = count_params_flops(cfg)
        actual = PointCapsNet(cfg).num_parameters()
        if params != actual:
            failures.append(f"counted {params} != allocated {actual}")
    if any(f < 0 or p < 0 for _, p, f in layer_costs(ModelConfig())):
        failures.append("negative layer cost")
    return not failures, "; ".join(failures) or "counted parameters match allocated tensors"


CHECKS = {
    "routing_oracle": lambda seeds: check_routing_oracle(samples=2 * seeds),
    "op_gradients": lambda seeds: check_op_gradients(seeds),
    "layer_gradients": lambda seeds: check_layer_gradients(seeds),
    "end_to_end_gradient": lambda seeds: check_end_to_end_gradient(seeds),
    "analytic_values": lambda seeds: check_analytic_values(),
    "logit_range": lambda seeds: check_logit_range(),
    "permutation_invariance": lambda seeds: check_permutation_invariance(),
    "cost_accounting": lambda seeds: check_cost_accounting(),
}


def run_checks(names=None, seeds=100):
    """Run the named checks (all by default); exceptions count as failures."""
    results = []
    for name in names or list(CHECKS):
        start = time.perf_counter()
        try:
            passed, detail = CHECKS[name](seeds)
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
