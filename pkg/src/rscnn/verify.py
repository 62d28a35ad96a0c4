"""Numerical verification utilities.

Central-difference gradient checking against the taped backward pass, and
the grid-convolution equivalence runner. Everything here recomputes values
through the forward pass only, so it stays independent of the analytic
gradients it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    backward,
    batchnorm,
    concat,
    cosine_loss,
    dropout,
    gather_rows,
    l2_normalize_rows,
    matmul,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax_cross_entropy,
)


def central_difference(f, x: np.ndarray, index, h: float = 1e-6) -> float:
    """d f / d x[index] by symmetric finite differences.

    ``f`` maps a raw array to a float and must not mutate its argument.
    """
    xp = x.copy()
    xp[index] += h
    fp = f(xp)
    xm = x.copy()
    xm[index] -= h
    fm = f(xm)
    return (fp - fm) / (2.0 * h)


def gradient_errors(
    f,
    tensors: list[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare analytic gradients with central differences.

    Args:
        f: zero-argument callable returning a scalar loss Tensor. It must
            read the current ``.data`` of each tensor in ``tensors``.
        tensors: leaf tensors whose ``.grad`` is already populated.
        max_entries: if set, check at most this many entries per tensor
            (sampled with ``rng``); otherwise check every entry.

    Returns one relative error per checked entry, using an absolute floor
    of 1e-6 in the denominator so near-zero gradients compare sanely.
    """
    errors = []
    for t in tensors:
        if t.grad is None:
            raise ValueError("tensor has no gradient to check")
        flat_idx = np.arange(t.data.size)
        if max_entries is not None and t.data.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_idx = np.sort(rng.choice(t.data.size, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = float(f().data)
            t.data[idx] = orig - h
            fm = float(f().data)
            t.data[idx] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(t.grad[idx])
            errors.append(abs(ana - num) / max(abs(num), 1e-6))
    return errors


# ---------------------------------------------------------------------------
# gradient-check suite

GRAD_TOL = 1e-4


@dataclass
class GradCheckCase:
    """Outcome of one finite-difference comparison.

    ``max_rel_error`` uses a 1e-6 absolute floor in the denominator.
    """

    name: str
    max_rel_error: float
    entries: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < GRAD_TOL


def _leaf(rng, shape, scale=1.0, offset=0.0):
    t = Tensor(offset + scale * rng.normal(size=shape), requires_grad=True)
    return t


def _case(name, f, leaves, max_entries=None, rng=None, h=1e-6) -> GradCheckCase:
    for t in leaves:
        t.grad = None  # leaves accumulate across backward calls
    loss = f()
    backward(loss)
    errs = gradient_errors(f, leaves, h=h, max_entries=max_entries, rng=rng)
    return GradCheckCase(name, max(errs), len(errs))


def check_op_gradients(seed: int = 0) -> list[GradCheckCase]:
    """Finite-difference check for every differentiable operation.

    All inputs are float64 and positioned away from kinks (relu at 0,
    max ties), where the analytic subgradient and the two-sided difference
    legitimately disagree.
    """
    rng = np.random.default_rng(seed)
    results = []

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = rng.normal(size=(3, 2))
    results.append(_case("matmul", lambda: reduce_sum(mul(matmul(a, b), w)), [a, b]))

    a2, b2 = _leaf(rng, (2, 3)), _leaf(rng, (1, 3))
    w2 = rng.normal(size=(2, 3))
    results.append(_case("add_broadcast", lambda: reduce_sum(mul(add(a2, b2), w2)), [a2, b2]))

    a3, b3 = _leaf(rng, (2, 3)), _leaf(rng, (3,))
    results.append(_case("mul_broadcast", lambda: reduce_sum(mul(mul(a3, b3), w2)), [a3, b3]))

    # keep inputs off the relu kink so the two-sided difference is valid
    xr = Tensor(np.sign(rng.normal(size=(4, 5))) * (0.2 + rng.random((4, 5))), requires_grad=True)
    wr = rng.normal(size=(4, 5))
    results.append(_case("relu", lambda: reduce_sum(mul(relu(xr), wr)), [xr]))

    # integer-valued entries guarantee gaps far above the probe step
    xm = Tensor(rng.permutation(20.0 * np.arange(20.0)).reshape(4, 5) * 0.1, requires_grad=True)
    wm = rng.normal(size=(4,))
    results.append(_case("reduce_max", lambda: reduce_sum(mul(reduce_max(xm, axis=1), wm)), [xm]))

    xs = _leaf(rng, (3, 4))
    ws = rng.normal(size=(4,))
    results.append(_case("reduce_sum_axis", lambda: reduce_sum(mul(reduce_sum(xs, axis=0), ws)), [xs]))
    results.append(_case("reduce_sum_all", lambda: mul(reduce_sum(xs), 1.7), [xs]))
    wv = rng.normal(size=(3,))
    results.append(_case("reduce_mean_axis", lambda: reduce_sum(mul(reduce_mean(xs, axis=1), wv)), [xs]))
    results.append(_case("reduce_mean_all", lambda: mul(reduce_mean(xs), -2.3), [xs]))

    xq = _leaf(rng, (2, 6))
    wq = rng.normal(size=(3, 4))
    results.append(_case("reshape", lambda: reduce_sum(mul(reshape(xq, (3, 4)), wq)), [xq]))

    c1, c2 = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    wc = rng.normal(size=(2, 5))
    results.append(_case("concat", lambda: reduce_sum(mul(concat([c1, c2], axis=-1), wc)), [c1, c2]))

    xg = _leaf(rng, (4, 3))
    idx = np.array([0, 2, 2, 1, 3, 2])
    wg = rng.normal(size=(6, 3))
    results.append(_case("gather_rows", lambda: reduce_sum(mul(gather_rows(xg, idx), wg)), [xg]))

    xd = _leaf(rng, (5, 4))
    wd = rng.normal(size=(5, 4))
    results.append(
        _case(
            "dropout",
            # fresh generator per call keeps the mask identical across probes
            lambda: reduce_sum(mul(dropout(xd, 0.4, np.random.default_rng(7), True), wd)),
            [xd],
        )
    )

    xn = Tensor(rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))), requires_grad=True)
    wn = rng.normal(size=(4, 3))
    results.append(_case("l2_normalize_rows", lambda: reduce_sum(mul(l2_normalize_rows(xn), wn)), [xn]))

    store = ParamStore(dtype=np.float64)
    st = store.add_bn("bn", 4)
    st.scale.tensor.data[...] = 0.7 + rng.random(4)
    st.shift.tensor.data[...] = rng.normal(size=4) * 0.3
    xb = _leaf(rng, (6, 4), scale=1.5)
    wb = rng.normal(size=(6, 4))
    results.append(
        _case(
            "batchnorm",
            lambda: reduce_sum(mul(batchnorm(xb, st, True), wb)),
            [xb, st.scale.tensor, st.shift.tensor],
        )
    )

    xl = _leaf(rng, (5, 3))
    tgt = rng.integers(3, size=5)
    results.append(_case("softmax_cross_entropy", lambda: softmax_cross_entropy(xl, tgt), [xl]))

    xc = Tensor(rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))), requires_grad=True)
    tu = rng.normal(size=(4, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    results.append(_case("cosine_loss", lambda: cosine_loss(xc, tu), [xc]))

    return results


def check_network_gradients(seed: int = 0, max_entries: int = 8) -> GradCheckCase:
    """Finite-difference check through a full miniature classifier.

    32-point clouds, three hierarchy levels (16, 4, 1), float64, training
    mode with deterministic grouping. Every parameter tensor participates;
    ``max_entries`` caps the probed entries per tensor.
    """
    from .geometry import PointCloud
    from .networks import build_params, classify_forward_batch, make_classifier_config

    rng = np.random.default_rng(seed)
    cfg = make_classifier_config(
        points=32,
        num_classes=2,
        channels=(6, 8, 12),
        base_radii=(0.5, 0.8),
        scales=2,
        neighbors=4,
        fc_widths=(8,),
    )
    store = build_params(cfg, dtype=np.float64)
    for p in store.params.values():
        if p.kind == "bn_scale":
            p.tensor.data[...] = 0.8 + 0.4 * rng.random(p.tensor.shape)
        elif p.kind == "bn_shift":
            p.tensor.data[...] = rng.normal(size=p.tensor.shape) * 0.05
        else:
            p.tensor.data[...] = rng.normal(size=p.tensor.shape) * 0.3
    batch = []
    for _ in range(2):
        v = rng.normal(size=(32, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        batch.append(PointCloud(v))
    targets = np.array([0, 1])

    def f():
        logits = classify_forward_batch(cfg, store, batch, training=True, rng=None)
        return softmax_cross_entropy(logits, targets)

    leaves = [p.tensor for p in store.params.values()]
    # h = 1e-5 is near the float64 optimum for an O(1) loss; at 1e-6 the
    # difference of two ~0.7 values is rounding-noise for the many entries
    # whose true gradient is ~1e-7
    return _case(
        "network.classifier32",
        f,
        leaves,
        max_entries=max_entries,
        rng=np.random.default_rng(seed + 1),
        h=1e-5,
    )


def check_gradients(seed: int = 0, max_entries: int = 8) -> list[GradCheckCase]:
    """Full suite: every operation plus the miniature network."""
    return check_op_gradients(seed) + [check_network_gradients(seed, max_entries)]


def gridconv_equivalence(instances: int = 50, seed: int = 0, size: int = 5) -> float:
    """Max deviation between relation-lookup convolution and dense 2D conv.

    Runs ``instances`` random kernel/feature-map pairs with 1..4 channels
    and returns the largest elementwise difference seen.
    """
    from .conv import grid_conv_oracle

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(1, 5))
        kernel = rng.normal(size=(3, 3, c))
        fmap = rng.normal(size=(size, size, c))
        worst = max(worst, grid_conv_oracle(kernel, fmap).max_abs_diff)
    return worst
