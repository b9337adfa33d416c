"""Dense float64 tensor kernels that the rest of the package builds on.

Tensors are plain ``numpy.ndarray`` values: C-contiguous (row-major),
dtype float64, rank >= 1. There is deliberately no broadcasting; every
shape mismatch is a hard error so that loop-oracle comparisons in the
test suite stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass(frozen=True)
class ActivationKind:
    """An elementwise activation, identified by tag.

    leaky_slope is used only by the "leaky_relu" tag and must lie in (0, 1).
    """

    tag: str
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.tag not in _ACTIVATION_TAGS:
            raise ValueError(f"unknown activation tag {self.tag!r}")
        if self.tag == "leaky_relu" and not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")


_ACTIVATION_TAGS = ("identity", "leaky_relu", "selu", "sigmoid", "tanh")

IDENTITY = ActivationKind("identity")
LEAKY_RELU = ActivationKind("leaky_relu")
SELU = ActivationKind("selu")
SIGMOID = ActivationKind("sigmoid")
TANH = ActivationKind("tanh")

#: Candidate activations, in canonical order (grid searches iterate this).
ALL_ACTIVATIONS = (IDENTITY, LEAKY_RELU, SELU, SIGMOID, TANH)


def as_tensor(x) -> np.ndarray:
    """Coerce x to a C-contiguous float64 array of rank >= 1."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim < 1:
        t = t.reshape(1)
    return t


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two equal-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def matvec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product: m is (J, I), x is (I,), result is (J,)."""
    if m.ndim != 2 or x.ndim != 1:
        raise ValueError(f"matvec: need rank-2 and rank-1, got {m.shape} and {x.shape}")
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: inner dimensions differ, {m.shape} vs {x.shape}")
    return m @ x


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Outer product of two vectors: result[j, k] = a[j] * b[k]."""
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError(f"outer: need rank-1 inputs, got {a.shape} and {b.shape}")
    return np.outer(a, b)


def n_mode_product(t: np.ndarray, z: np.ndarray, n: int) -> np.ndarray:
    """Contract tensor t with vector z along mode n (1-based).

    The result drops dimension n, so its rank is rank(t) - 1. A rank-1
    input therefore contracts to a length-1 rank-1 tensor (scalar shape
    is kept at rank >= 1 to preserve the tensor invariant).
    """
    if not 1 <= n <= t.ndim:
        raise ValueError(f"n_mode_product: mode {n} out of range for rank {t.ndim}")
    if z.ndim != 1 or z.shape[0] != t.shape[n - 1]:
        raise ValueError(
            f"n_mode_product: vector length {z.shape} does not match extent "
            f"{t.shape[n - 1]} of mode {n}"
        )
    out = np.tensordot(t, z, axes=([n - 1], [0]))
    if out.ndim == 0:
        out = out.reshape(1)
    return out


def n_mode_product_mat(t: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    """Contract tensor t with matrix w (J, I_n) along mode n (1-based).

    Mode n's extent I_n is replaced by J in the output shape.
    """
    if not 1 <= n <= t.ndim:
        raise ValueError(f"n_mode_product_mat: mode {n} out of range for rank {t.ndim}")
    if w.ndim != 2 or w.shape[1] != t.shape[n - 1]:
        raise ValueError(
            f"n_mode_product_mat: matrix {w.shape} does not match extent "
            f"{t.shape[n - 1]} of mode {n}"
        )
    out = np.tensordot(t, w, axes=([n - 1], [1]))
    return np.moveaxis(out, -1, n - 1)


def apply_activation(kind: ActivationKind, x: np.ndarray) -> np.ndarray:
    """Apply the activation elementwise. identity returns x unchanged."""
    tag = kind.tag
    if tag == "identity":
        return x
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if tag == "tanh":
        return np.tanh(x)
    if tag == "leaky_relu":
        return np.where(x >= 0.0, x, kind.leaky_slope * x)
    if tag == "selu":
        return np.where(x >= 0.0, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * np.expm1(x))
    raise ValueError(f"unknown activation tag {tag!r}")


def activation_grad(kind: ActivationKind, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Elementwise f'(x) * upstream for the activation's derivative f'.

    leaky_relu's derivative at exactly 0 is defined as the slope.
    """
    if x.shape != upstream.shape:
        raise ValueError(f"activation_grad: shape mismatch {x.shape} vs {upstream.shape}")
    tag = kind.tag
    if tag == "identity":
        return upstream
    if tag == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 - s) * upstream
    if tag == "tanh":
        t = np.tanh(x)
        return (1.0 - t * t) * upstream
    if tag == "leaky_relu":
        return np.where(x > 0.0, 1.0, kind.leaky_slope) * upstream
    if tag == "selu":
        return np.where(x >= 0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(x)) * upstream
    raise ValueError(f"unknown activation tag {tag!r}")
