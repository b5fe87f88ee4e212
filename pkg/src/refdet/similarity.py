"""Embedding similarities: plain cosine, temperature-activated cosine and the
exponential Euclidean variant. Scalar functions take 1-D arrays; the
``*_matrix`` forms are batched and accept numpy arrays or torch tensors.
"""
import numpy as np
import torch
from scipy.special import expit as _sigmoid

DEFAULT_TEMPERATURE = 10.0


def _check_pair(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite embedding entries")
    return u, v


def cosine_similarity(u, v):
    u, v = _check_pair(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def activated_similarity(u, v, temperature=DEFAULT_TEMPERATURE):
    """``sigmoid(temperature * cos(u, v))``; the temperature multiplies."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return float(_sigmoid(temperature * cosine_similarity(u, v)))


def euclidean_similarity(u, v):
    u, v = _check_pair(u, v)
    return float(np.exp(-np.linalg.norm(u - v)))


def cosine_matrix(a, b):
    """Pairwise cosine between rows of ``a`` (M, D) and ``b`` (N, D)."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = torch.as_tensor(a)
        b = torch.as_tensor(b, dtype=a.dtype)
        if a.shape[-1] != b.shape[-1]:
            raise ValueError("dimension mismatch")
        an = torch.nn.functional.normalize(a, dim=-1, eps=1e-12)
        bn = torch.nn.functional.normalize(b, dim=-1, eps=1e-12)
        return (an @ bn.transpose(-1, -2)).clamp(-1.0, 1.0)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity of a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def activated_matrix(a, b, temperature=DEFAULT_TEMPERATURE, metric="cos"):
    """Pairwise activated similarity in (0, 1).

    ``metric="cos"`` gives ``sigmoid(T * cos)``; ``metric="euc"`` gives
    ``exp(-||a - b||)`` (temperature ignored).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if metric == "euc":
        if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
            return torch.exp(-torch.cdist(torch.as_tensor(a), torch.as_tensor(b)))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        if a.shape[-1] != b.shape[-1]:
            raise ValueError("dimension mismatch")
        return np.exp(-np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))
    if metric != "cos":
        raise ValueError(f"unknown similarity metric {metric!r}")
    c = cosine_matrix(a, b)
    if isinstance(c, torch.Tensor):
        return torch.sigmoid(temperature * c)
    return _sigmoid(temperature * c)
