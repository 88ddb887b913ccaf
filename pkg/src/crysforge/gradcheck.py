"""Central finite differences against autograd, one parameter tensor at a time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    n_checked: int


def _numeric_grad(loss_fn, param: torch.Tensor, flat_idx, eps: float) -> np.ndarray:
    flat = param.data.view(-1)
    out = np.empty(len(flat_idx))
    for n, i in enumerate(flat_idx):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def check_gradients(module: torch.nn.Module, loss_fn, *, eps: float = 1e-6, max_entries: int = 24, seed: int = 0):
    """Compare autograd with central differences for every parameter tensor.

    ``loss_fn()`` must rebuild the loss from scratch on each call.  Up to
    ``max_entries`` scalar entries per tensor are probed, plus one random
    direction through the whole tensor.  The returned error per tensor is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    rng = np.random.default_rng(seed)
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    results = []
    for name, p in module.named_parameters():
        if p.grad is None:
            raise AssertionError(f"parameter {name} received no gradient")
        g = p.grad.detach().view(-1).cpu().numpy().astype(np.float64)
        idx = rng.choice(p.numel(), size=min(max_entries, p.numel()), replace=False)
        with torch.no_grad():
            num = _numeric_grad(loss_fn, p, idx, eps)
            direction = torch.from_numpy(rng.normal(size=p.numel())).to(p.dtype).view_as(p)
            p.data += eps * direction
            up = loss_fn().item()
            p.data -= 2 * eps * direction
            down = loss_fn().item()
            p.data += eps * direction
        ana = np.concatenate([g[idx], [float(g @ direction.view(-1).cpu().numpy())]])
        num = np.concatenate([num, [(up - down) / (2 * eps)]])
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        results.append(TensorCheck(name, float(np.linalg.norm(ana - num) / scale), len(ana)))
    return results
