"""Shared oracles for the test suite: finite differences and loop references."""

import torch


def central_difference(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn w.r.t. every element."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = eps * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max-norm relative error between two gradients."""
    scale = max(numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def cosine(a, b):
    """Reference cosine with the zero-norm-gives-zero convention."""
    na = (a * a).sum() ** 0.5
    nb = (b * b).sum() ** 0.5
    if na == 0 or nb == 0:
        return 0.0
    return float((a * b).sum() / (na * nb))
