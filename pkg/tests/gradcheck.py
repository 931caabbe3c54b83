"""Central finite-difference gradient checking shared by the test modules."""

from __future__ import annotations

import numpy as np

from efficientfi import tensor_core as tc


def check(build, arrays, eps=1e-3, samples=None, seed=0):
    """Compare autodiff against central differences.

    ``build(*nodes)`` returns a scalar node. Returns the worst relative error
    over all inputs, measured as ||g_auto - g_fd|| / max(||g_fd||, ||g_auto||).
    With ``samples`` set, only that many random coordinates per input are
    perturbed.
    """
    nodes = [tc.parameter(a) for a in arrays]
    tc.backward(build(*nodes))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for node in nodes:
        flat = node.value.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            coords = rng.choice(flat.size, samples, replace=False)
        auto = node.grad.reshape(-1)[coords].astype(np.float64)
        fd = np.empty(len(coords))
        for n, i in enumerate(coords):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(build(*nodes).value)
            flat[i] = keep - eps
            down = float(build(*nodes).value)
            flat[i] = keep
            fd[n] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(fd), np.linalg.norm(auto), 1e-12)
        worst = max(worst, float(np.linalg.norm(auto - fd) / scale))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    """Random values with |v| >= margin so ReLU kinks are not crossed by small steps."""
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v)


def fd_gradient(loss_fn, node, coords, eps):
    """Central differences of ``loss_fn()`` at flat coordinates of ``node``."""
    flat = node.value.reshape(-1)
    fd = np.empty(len(coords))
    for n, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + eps
        up = float(loss_fn().value)
        flat[i] = keep - eps
        down = float(loss_fn().value)
        flat[i] = keep
        fd[n] = (up - down) / (2 * eps)
    return fd


def relative_error(auto, fd):
    auto = np.asarray(auto, dtype=np.float64)
    scale = max(np.linalg.norm(fd), np.linalg.norm(auto), 1e-12)
    return float(np.linalg.norm(auto - fd) / scale)


def check_nodes(loss_fn, nodes, eps=1e-6, samples=20, seed=0, reference=None):
    """Like :func:`check` but perturbs existing parameter nodes in place.

    ``loss_fn()`` rebuilds the scalar loss from the current node values.
    With ``reference=(ref_loss_fn, ref_nodes)`` the differences are taken on
    that graph instead (a float64 twin), so a float32 backward pass can be
    judged without float32 rounding noise in the difference quotient.
    """
    for n in nodes:
        n.grad = None
    tc.backward(loss_fn())
    ref_fn, ref_nodes = reference if reference is not None else (loss_fn, nodes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for node, ref in zip(nodes, ref_nodes):
        size = node.value.size
        coords = rng.choice(size, min(samples, size), replace=False)
        auto = node.grad.reshape(-1)[coords]
        worst = max(worst, relative_error(auto, fd_gradient(ref_fn, ref, coords, eps)))
    return worst
