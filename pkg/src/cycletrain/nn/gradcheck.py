"""Central finite-difference check of the analytic backward pass."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .layers import ReLU, ResidualBlock
from .loss import softmax_cross_entropy
from .network import Network

MIN_EPS = 1e-7


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def _relu_masks(net: Network) -> list[np.ndarray]:
    masks = []
    for _, _, layer in net.layers():
        subs = [sub for _, sub in layer.branch] if isinstance(layer, ResidualBlock) else [layer]
        masks.extend(sub._cache.copy() for sub in subs if isinstance(sub, ReLU))
    return masks


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(net: Network, batch, targets, eps: float = 1e-5, max_per_param: int | None = None,
               seed: int = 0, objective=softmax_cross_entropy, report: dict | None = None) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``net`` must be in 64-bit mode. Only trainable parameters are checked. With
    ``max_per_param`` set, that many entries per tensor are sampled uniformly
    (seeded); otherwise every entry is perturbed. The network's mode, running
    statistics, dropout counter and parameter values are restored afterwards,
    and the dropout mask is held fixed across all perturbed passes.

    A difference quotient is only meaningful if both perturbed points sit on
    the same ReLU activation pattern as the base point. When a perturbation
    flips any ReLU, the entry is retried with a halved step down to
    1e-7; if it still straddles a kink it is skipped.

    If ``report`` is given it is filled with the per-parameter maximum error,
    plus ``"skipped"``: the number of entries skipped at kinks.
    """
    if net.dtype != np.float64:
        raise ConfigError("grad_check needs a float64 network (use net.astype(np.float64))")
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"eps must be in [1e-7, 1e-4], got {eps}")
    batch = np.asarray(batch, dtype=np.float64)
    count0 = net.forward_count
    buffers0 = [(n, b.copy()) for n, b in net.named_buffers()]

    def restore_state():
        net.forward_count = count0
        for n, b in buffers0:
            net.set_buffer(n, b.copy())

    def loss_and_masks():
        restore_state()
        loss, _ = objective(net.forward(batch), targets)
        masks = _relu_masks(net)
        net._abort()
        return loss, masks

    net.zero_grad()
    restore_state()
    _, base_masks = loss_and_masks()
    restore_state()
    _, grad_logits = objective(net.forward(batch), targets)
    net.backward(grad_logits)

    rng = np.random.default_rng(seed)
    worst = 0.0
    skipped = 0
    for name, p in net.named_parameters():
        if not p.trainable:
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        numeric = np.full(idx.size, np.nan)
        for j, k in enumerate(idx):
            orig = flat[k]
            h = eps
            while h >= MIN_EPS * (1 - 1e-9):
                flat[k] = orig + h
                f_plus, m_plus = loss_and_masks()
                flat[k] = orig - h
                f_minus, m_minus = loss_and_masks()
                flat[k] = orig
                if _same(m_plus, base_masks) and _same(m_minus, base_masks):
                    numeric[j] = (f_plus - f_minus) / (2 * h)
                    break
                h /= 2
        ok = ~np.isnan(numeric)
        skipped += int((~ok).sum())
        errs = relative_error(analytic.reshape(-1)[idx][ok], numeric[ok])
        err = float(errs.max()) if errs.size else 0.0
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    if report is not None:
        report["skipped"] = skipped
    net.zero_grad()
    restore_state()
    return worst


def _small_net(layers, seed: int, in_channels=None) -> Network:
    from .models import init_group

    init_group(layers, seed, 0)
    meta = {"in_channels": in_channels} if in_channels else {}
    return Network([layers], seed=seed, meta=meta).astype(np.float64)


def gradcheck_cases(seed: int = 0) -> dict:
    """Named ``(network, batch, targets, max_per_param)`` cases covering every layer kind.

    Layers that feed batchnorm carry no bias: batchnorm cancels a constant
    shift, so such a bias has an exactly zero gradient that no relative
    error measure can check.
    """
    from .layers import BatchNorm2d, Conv2d, Dense, Dropout, Flatten, GlobalAvgPool
    from .models import build_classifier

    rng = np.random.default_rng(seed)
    vec = rng.normal(size=(6, 5))
    img = rng.normal(size=(4, 2, 6, 6))
    y3 = rng.integers(0, 3, 6)
    y3i = rng.integers(0, 3, 4)
    pool = [GlobalAvgPool(), Flatten(), Dense(3, 3)]
    cases = {
        "dense+relu": (_small_net([Dense(5, 7), ReLU(), Dense(7, 3)], seed), vec, y3, None),
        "conv2d": (_small_net([Conv2d(2, 3, 3, 1, 1, bias=True), ReLU(), *pool], seed, 2), img, y3i, None),
        "conv2d-stride2": (_small_net([Conv2d(2, 3, 3, 2, "same", bias=True), ReLU(),
                                       GlobalAvgPool(), Flatten(), Dense(3, 3)], seed, 2), img, y3i, None),
        "batchnorm2d-train": (_small_net([Conv2d(2, 3, 3, 1, 1), BatchNorm2d(3), ReLU(),
                                          GlobalAvgPool(), Flatten(), Dense(3, 3)], seed, 2), img, y3i, None),
        "batchnorm1d-train": (_small_net([Dense(5, 7, bias=False), BatchNorm2d(7), ReLU(), Dense(7, 3)], seed),
                              vec, y3, None),
        "dropout-train": (_small_net([Dense(5, 7), ReLU(), Dropout(0.3), Dense(7, 3)], seed), vec, y3, None),
        "residual-block": (_small_net([Conv2d(2, 3, 3, 1, 1), ResidualBlock(3), GlobalAvgPool(), Flatten(),
                                       Dense(3, 3)], seed, 2), img, y3i, None),
    }
    ev = _small_net([Dense(5, 7), BatchNorm2d(7), ReLU(), Dropout(0.3), Dense(7, 3)], seed).eval()
    cases["batchnorm+dropout-eval"] = (ev, vec, y3, None)
    full = build_classifier(1, 5, seed, hidden=16).astype(np.float64)
    cases["mini-resnet"] = (full, rng.uniform(size=(8, 1, 8, 8)), rng.integers(0, 5, 8), 30)
    return cases


def gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per case of :func:`gradcheck_cases`."""
    return {name: grad_check(net, x, y, eps=eps, max_per_param=k, seed=seed)
            for name, (net, x, y, k) in gradcheck_cases(seed).items()}
