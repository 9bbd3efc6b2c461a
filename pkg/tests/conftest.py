"""Shared fixtures and the finite-difference verification harness."""

import numpy as np
import pytest

from volnet import network, training
from volnet.layers import cross_entropy


# ---------------------------------------------------------------------------
# finite-difference machinery
# ---------------------------------------------------------------------------

def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalized by the largest gradient magnitude seen.

    The scale is global (the gradient of one scalar loss), so components
    that are exactly zero do not blow the ratio up while genuinely wrong
    components of any size are caught.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def central_diff(loss_fn, arr: np.ndarray, h: float, coords=None) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. arr entries.

    loss_fn() is re-evaluated after each in-place perturbation; it may
    return either a float or a (float, selection_digest) pair. When a
    perturbation flips the selection digest (a ReLU sign or an argmax
    pick changed), that coordinate is skipped by writing NaN, which the
    caller must mask out.
    """
    flat = arr.ravel()
    idx = range(arr.size) if coords is None else coords
    out = np.zeros(arr.size, dtype=np.float64)

    def call():
        res = loss_fn()
        return res if isinstance(res, tuple) else (res, None)

    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        lp, sp = call()
        flat[i] = orig - h
        lm, sm = call()
        flat[i] = orig
        if sp is not None and sp != sm:
            out[i] = np.nan
            continue
        out[i] = (lp - lm) / (2.0 * h)
    return out.reshape(arr.shape)


def fd_step(dtype) -> float:
    return 1e-2 if dtype == np.float32 else 1e-6


def fd_tolerance(dtype) -> float:
    # acceptance thresholds: 1e-3 at 32-bit, 1e-5 at 64-bit
    return 1e-3 if dtype == np.float32 else 1e-5


def compare_grads(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> float:
    """Assert agreement ignoring NaN-masked (selection-flipped) coordinates."""
    mask = ~np.isnan(numeric)
    assert mask.any(), "every finite-difference coordinate was excluded"
    err = max_rel_error(analytic[mask], numeric[mask])
    assert err < tol, f"max relative error {err:.3e} >= {tol}"
    return err


# ---------------------------------------------------------------------------
# tiny two-pipeline network used by end-to-end checks
# ---------------------------------------------------------------------------

TINY_INPUTS = ("smri_l", "smri_r")


def tiny_fusion_spec(side: int = 5, f0: int = 6, class_count: int = 2) -> network.NetworkSpec:
    """Conv block + one inception + pool + GAP per pipeline, fused tail.

    Dropout keep probability is 1 so train-mode forwards are
    deterministic without an rng.
    """
    blocks = (
        network.build_conv_block(3, f0),
        network.build_inception_block(f0),
        network.BlockSpec("maxpool", {"pool": 3, "stride": 2, "padding": "same"}),
        network.BlockSpec("global_avgpool"),
    )
    pipes = tuple(network.PipelineSpec(n, blocks) for n in TINY_INPUTS)
    tail = (
        network.BlockSpec("concat"),
        network.BlockSpec("dropout", {"keep_prob": 1.0}),
        network.BlockSpec("dense", {"width": class_count}),
        network.BlockSpec("softmax"),
    )
    return network.NetworkSpec(pipes, tail, class_count, input_side=side)


def tiny_network(seed: int, dtype=np.float32, side: int = 5):
    spec = tiny_fusion_spec(side=side)
    params = training.xavier_init(spec, seed)
    if dtype != np.float32:
        params = {k: v.astype(dtype) for k, v in params.items()}
    net = network.Network(spec, params)
    rng = np.random.default_rng(seed + 1000)
    inputs = {
        n: (0.5 * rng.standard_normal((1, 1, side, side, side))).astype(dtype)
        for n in TINY_INPUTS
    }
    targets = np.zeros((1, 2), dtype=dtype)
    targets[0, seed % 2] = 1
    return net, inputs, targets


def network_loss_fn(net, inputs, targets):
    """Loss closure for finite differences; reports the selection state."""

    def loss():
        probs = net.forward_batch(inputs, mode="train")
        state = net.selection_state()
        value, _ = cross_entropy(probs.astype(np.float64), targets.astype(np.float64))
        return value, state

    return loss


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
