"""Adam construction plus the finiteness guards every train step goes through."""
import logging
import math

import torch

from errors import NonFiniteGradientError, NonFiniteLossError

logger = logging.getLogger(__name__)


def make_optimizer(params, lr, betas=(0.9, 0.999), eps=1e-8):
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def ensure_finite_loss(losses, stage, step=None):
    """Raise with every loss component attached if any of them is NaN/inf."""
    values = {name: float(value.detach()) if torch.is_tensor(value) else float(value)
              for name, value in losses.items()}
    bad = [name for name, value in values.items() if not math.isfinite(value)]
    if bad:
        diagnostics = dict(values, stage=stage, step=step, non_finite=bad)
        logger.error('non-finite loss in %s at step %s: %s', stage, step, bad)
        raise NonFiniteLossError(f'{stage}: non-finite loss component(s) {bad}', diagnostics)
    return values


def optimizer_step(optimizer, stage='train', step=None):
    """Check gradients, then apply one Adam update and clear them."""
    bad = []
    for group in optimizer.param_groups:
        for i, p in enumerate(group['params']):
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                bad.append(i)
    if bad:
        raise NonFiniteGradientError(
            f'{stage}: non-finite gradients in {len(bad)} parameter tensor(s)',
            {'stage': stage, 'step': step, 'param_indices': bad},
        )
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
