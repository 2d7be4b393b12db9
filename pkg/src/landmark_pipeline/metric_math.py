"""Descriptor-learning numerics: GeM pooling and margin-based cosine logits.

Everything here is a pure float64 function with an analytic gradient,
sized for verification rather than training. The 512-d reduction layer
that follows pooling in the full model is a projection contract outside
this module; training it is out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GEM_P = 3.0
DEFAULT_MARGIN = 0.3
# The margin losses' scale hyperparameter is a convention from the loss
# literature, not a stated constant of this pipeline.
DEFAULT_SCALE = 30.0


@dataclass
class GemConfig:
    p: float = DEFAULT_GEM_P

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")


@dataclass
class MarginLossConfig:
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE
    variant: str = "arc"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.variant not in ("arc", "cos"):
            raise ValueError(f"variant must be 'arc' or 'cos', got {self.variant!r}")


def _as_map(feature_map: np.ndarray) -> np.ndarray:
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError(f"feature map must be HxWxC, got shape {fm.shape}")
    if fm.shape[0] * fm.shape[1] == 0:
        raise ValueError("feature map has no spatial positions")
    # Clamp-at-zero mirrors the ReLU that precedes pooling.
    return np.maximum(fm, 0.0)


def gem_pool(feature_map: np.ndarray, cfg: GemConfig) -> np.ndarray:
    """Generalized-mean pool an HxWxC map to a C-vector.

    p=1 is exactly average pooling; larger p leans toward max pooling.
    """
    fm = _as_map(feature_map)
    hw = fm.shape[0] * fm.shape[1]
    if cfg.p == 1:
        return fm.sum(axis=(0, 1)) / hw
    powered = np.power(fm, cfg.p).sum(axis=(0, 1)) / hw
    return np.power(powered, 1.0 / cfg.p)


def gem_grad(feature_map: np.ndarray, cfg: GemConfig) -> np.ndarray:
    """Analytic d(pooled_c)/d(activation_hwc), shaped like the input map.

    grad = (1/(HW)) * a^(p-1) * out_c^(1-p); exact zeros get subgradient 0
    (except at p=1 where pooling is plain averaging).
    """
    fm = _as_map(feature_map)
    hw = fm.shape[0] * fm.shape[1]
    if cfg.p == 1:
        return np.full_like(fm, 1.0 / hw)
    out = gem_pool(fm, cfg)
    grad = np.zeros_like(fm)
    live = out > 0
    if live.any():
        scale = np.power(out[live], 1.0 - cfg.p) / hw
        a = fm[..., live]
        grad[..., live] = np.where(a > 0, np.power(a, cfg.p - 1.0) * scale, 0.0)
    return grad


def margin_logits(
    cosines: np.ndarray, target: int, cfg: MarginLossConfig
) -> np.ndarray:
    """Scaled per-class logits with the margin applied to the target class.

    'arc' adds the margin to the angle: scale * cos(arccos(c) + m), with the
    standard fallback scale * (c - m*sin(m)) once the shifted angle passes
    pi. 'cos' subtracts it from the cosine: scale * (c - m). Zero margin
    short-circuits to scale * cosines for both variants.
    """
    c = np.asarray(cosines, dtype=np.float64)
    if c.ndim != 1:
        raise ValueError("cosines must be a 1-D per-class vector")
    if not (0 <= target < c.shape[0]):
        raise ValueError(f"target {target} out of range for {c.shape[0]} classes")
    if (np.abs(c) > 1.0).any():
        worst = float(c[np.argmax(np.abs(c))])
        raise ValueError(f"cosine out of [-1, 1]: {worst}")

    logits = cfg.scale * c
    if cfg.margin == 0:
        return logits
    ct = float(c[target])
    if cfg.variant == "cos":
        logits[target] = cfg.scale * (ct - cfg.margin)
    else:
        theta = math.acos(ct)
        if theta + cfg.margin <= math.pi:
            logits[target] = cfg.scale * math.cos(theta + cfg.margin)
        else:
            logits[target] = cfg.scale * (ct - cfg.margin * math.sin(cfg.margin))
    return logits


def margin_logits_grad(
    cosines: np.ndarray, target: int, cfg: MarginLossConfig
) -> np.ndarray:
    """d(logit_k)/d(cosine_k); logits couple to their own class only."""
    c = np.asarray(cosines, dtype=np.float64)
    grad = np.full(c.shape, cfg.scale)
    if cfg.margin == 0 or cfg.variant == "cos":
        return grad
    ct = float(c[target])
    theta = math.acos(ct)
    if theta + cfg.margin <= math.pi:
        # d/dc cos(arccos(c) + m) = sin(theta + m) / sin(theta)
        grad[target] = cfg.scale * math.sin(theta + cfg.margin) / math.sin(theta)
    return grad


def softmax_xent(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against the target class.

    Returns (loss, gradient); the gradient is softmax(logits) - onehot.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    if not (0 <= target < z.shape[0]):
        raise ValueError(f"target {target} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    log_norm = math.log(np.exp(shifted).sum())
    loss = log_norm - float(shifted[target])
    grad = np.exp(shifted - log_norm)
    grad[target] -= 1.0
    return loss, grad


def margin_loss(
    cosines: np.ndarray, target: int, cfg: MarginLossConfig
) -> tuple[float, np.ndarray]:
    """End-to-end margin loss: value and analytic gradient w.r.t. cosines."""
    logits = margin_logits(cosines, target, cfg)
    loss, dloss_dlogits = softmax_xent(logits, target)
    return loss, dloss_dlogits * margin_logits_grad(cosines, target, cfg)


def _fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = fn(x)
        xf[i] = orig - h
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def _grads_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-5) -> bool:
    return bool(np.all(np.abs(analytic - numeric) <= tol * (1.0 + np.abs(numeric))))


def self_check(seed: int = 0, instances: int = 100) -> list[tuple[str, bool, str]]:
    """Gradient and property checks backing the ``mathcheck`` subcommand.

    Returns (check name, passed, detail) rows; every analytic gradient is
    validated against central finite differences in float64.
    """
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, bool, str]] = []

    fm = rng.uniform(0.5, 2.0, size=(4, 5, 3))
    ok = np.array_equal(gem_pool(fm, GemConfig(p=1)), fm.mean(axis=(0, 1)))
    rows.append(("gem p=1 equals mean exactly", ok, ""))

    example = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
    got = float(gem_pool(example, GemConfig(p=3))[0])
    want = 25.0 ** (1.0 / 3.0)
    rows.append(
        ("gem 2x2 [1,2,3,4] p=3 equals 25^(1/3)", abs(got - want) <= 1e-9, f"{got:.9f}")
    )

    ok = True
    ps = [1.0, 1.5, 2.0, 3.0, 5.0]
    for _ in range(20):
        m = rng.uniform(0.0, 3.0, size=(3, 4, 2))
        pooled = [gem_pool(m, GemConfig(p=p)) for p in ps]
        for lo, hi in zip(pooled, pooled[1:]):
            ok &= bool(np.all(hi >= lo - 1e-12))
    rows.append(("gem non-decreasing in p", ok, ""))

    ok = True
    for i in range(instances):
        m = rng.uniform(0.1, 2.0, size=(3, 3, 2))
        p = float(rng.uniform(1.0, 5.0))
        analytic = gem_grad(m, GemConfig(p=p))
        numeric = np.empty_like(m)
        for ch in range(m.shape[2]):
            numeric[..., ch] = _fd_gradient(
                lambda x, ch=ch, p=p: float(gem_pool(x, GemConfig(p=p))[ch]), m
            )[..., ch]
        ok &= _grads_close(analytic, numeric)
        if not ok:
            break
    rows.append((f"gem gradient vs finite differences ({instances}x)", ok, ""))

    c = rng.uniform(-0.9, 0.9, size=8)
    for variant in ("arc", "cos"):
        cfg0 = MarginLossConfig(margin=0.0, scale=17.0, variant=variant)
        ok = np.array_equal(margin_logits(c.copy(), 2, cfg0), 17.0 * c)
        rows.append((f"margin=0 is scaled cosine ({variant})", ok, ""))

    got = float(
        margin_logits(np.array([1.0, 0.0]), 0, MarginLossConfig(margin=0.3, scale=1.0, variant="arc"))[0]
    )
    rows.append(("arc target cos=1 m=0.3 s=1", abs(got - math.cos(0.3)) <= 1e-12, f"{got:.6f}"))
    got = float(
        margin_logits(np.array([0.7, 0.0]), 0, MarginLossConfig(margin=0.3, scale=30.0, variant="cos"))[0]
    )
    rows.append(("cos target 0.7 m=0.3 s=30 gives 12", abs(got - 12.0) <= 1e-12, f"{got:.6f}"))

    loss, _ = softmax_xent(np.zeros(7), 3)
    rows.append(("uniform softmax loss is ln K", abs(loss - math.log(7)) <= 1e-12, f"{loss:.9f}"))

    ok = True
    for i in range(instances):
        k = int(rng.integers(2, 9))
        cosines = rng.uniform(-0.9, 0.9, size=k)
        target = int(rng.integers(0, k))
        variant = "arc" if i % 2 == 0 else "cos"
        cfg = MarginLossConfig(margin=0.3, scale=float(rng.uniform(1.0, 40.0)), variant=variant)
        _, analytic = margin_loss(cosines, target, cfg)
        numeric = _fd_gradient(
            lambda x, t=target, cc=cfg: margin_loss(x, t, cc)[0], cosines.copy()
        )
        ok &= _grads_close(analytic, numeric)
        if not ok:
            break
    rows.append((f"margin loss gradient vs finite differences ({instances}x)", ok, ""))

    return rows
