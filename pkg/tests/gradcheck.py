"""Central finite-difference oracle shared by the unit and acceptance suites."""

import numpy as np
import torch

from vibrosense.training import LossWeights, grad, total_loss


def fd_relative_errors(model, x, classes, levels, weights=LossWeights(), token_mask=None,
                       step=1e-4, max_entries=None, seed=0):
    """Per-block ``|g_fd - g| / max(|g_fd| + |g|, tiny)`` over checked entries."""
    _, g = grad(model, x, classes, levels, weights, token_mask=token_mask)
    rng = np.random.default_rng(seed)
    errors = {}

    def loss():
        with torch.no_grad():
            cl, ll = model(x, token_mask=token_mask)
            return float(total_loss(cl, ll, classes, levels, weights))

    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        fd = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            fd[k] = (up - down) / (2 * step)
        an = g[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(fd) + np.linalg.norm(an), 1e-12)
        errors[name] = float(np.linalg.norm(fd - an) / denom)
    return errors
