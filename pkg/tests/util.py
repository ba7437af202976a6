"""Shared test helpers: tolerance checks and gradient verification."""

import numpy as np

from tokenloc import numerics as nm


def assert_grads_close(analytic, numeric, rel=1e-3, floor=1e-4, what=""):
    """Elementwise |a - n| <= max(floor, rel * max(|a|, |n|))."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    tol = np.maximum(floor, rel * np.maximum(np.abs(analytic), np.abs(numeric)))
    gap = np.abs(analytic - numeric)
    worst = float((gap - tol).max())
    assert np.all(gap <= tol), (
        f"{what}: gradient mismatch, worst excess {worst:.3e} "
        f"(max gap {gap.max():.3e})")


def check_op_gradients(build_loss, arrays, h=1e-2, rel=1e-3, floor=1e-4, what=""):
    """Compare tape gradients of a scalar-valued composite against central
    finite differences, for every differentiable argument.

    `build_loss(*args)` must accept Nodes or plain arrays and return a
    scalar (Node or array respectively).
    """
    tape = nm.GradTape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build_loss(*leaves)
    tape.backward(loss)
    for i, (leaf, base) in enumerate(zip(leaves, arrays)):
        def f(x, i=i):
            plain = list(arrays)
            plain[i] = x
            return float(nm.value_of(build_loss(*plain)))

        fd = nm.finite_diff_grad(f, base, h)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(base, dtype=np.float64)
        assert_grads_close(ad, fd, rel=rel, floor=floor, what=f"{what} arg{i}")


def weighted_sum(weights):
    """Folds an op output into a scalar so gradients can be checked."""
    def fold(out):
        return nm.reduce_sum(nm.mul(out, weights))
    return fold
