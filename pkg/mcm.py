"""Morphological consistency module: GRU over latents -> 24 bone lengths.

Pretrained on frozen AE latents, then frozen and used as a differentiable critic
whose gradient reaches only the masked latent positions.
"""
import hashlib
import logging

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from optimization import ensure_finite_loss, optimizer_step
from skeleton import NUM_BONES

logger = logging.getLogger(__name__)


class MCM(nn.Module):
    def __init__(self, latent_dim=64, hidden=128, num_bones=NUM_BONES):
        super().__init__()
        self.gru = nn.GRU(latent_dim, hidden, batch_first=True)
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, num_bones))

    def forward(self, z, lengths=None):
        """``(B, T, d)`` latents -> ``(B, 24)``; ``lengths`` marks right-padded batches."""
        if lengths is not None:
            lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
            z = pack_padded_sequence(z, lengths, batch_first=True, enforce_sorted=False)
        _, hidden = self.gru(z)
        return self.head(hidden[-1])

    def freeze(self):
        self.eval()
        self.requires_grad_(False)
        return self


def mcm_predict(mcm, latents):
    """Raw 24-vector for one latent sequence; entries are not clamped to be nonnegative."""
    dtype = mcm.head[0].weight.dtype
    z = torch.as_tensor(latents.latents, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        return mcm(z)[0].double().numpy()


def mcm_pretrain_loss(mcm, z, b, lengths=None):
    return torch.sum((mcm(z, lengths) - b) ** 2, dim=-1).mean()


def morph_guide_loss(mcm, z_live, z_true, mask, b, lengths=None):
    """``||f(Z_hat) - b||^2`` where only ``mask`` rows of ``z_live`` carry gradient."""
    z_hat = torch.where(mask.unsqueeze(-1), z_live, z_true.detach())
    return torch.sum((mcm(z_hat, lengths) - b) ** 2, dim=-1).mean()


def mcm_train_step(mcm, optimizer, z, b, lengths=None, step=None):
    loss = mcm_pretrain_loss(mcm, z, b, lengths)
    metrics = ensure_finite_loss({'total': loss}, 'mcm', step)
    loss.backward()
    optimizer_step(optimizer, 'mcm', step)
    return metrics


def parameter_checksum(module):
    """SHA-256 hex digest over every parameter's name, dtype, shape and raw bytes, in name order.

    The generator stage must leave it unchanged.
    """
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        array = p.detach().cpu().contiguous().numpy()
        digest.update(f'{name}:{array.dtype}:{array.shape};'.encode('utf-8'))
        digest.update(array.tobytes())
    return digest.hexdigest()


def collate_latents(latent_list, dtype=torch.float32):
    lengths = [z.length for z in latent_list]
    longest = max(lengths)
    dim = latent_list[0].dim
    z = np.zeros((len(latent_list), longest, dim))
    for i, latents in enumerate(latent_list):
        z[i, :latents.length] = latents.latents
    return torch.as_tensor(z, dtype=dtype), torch.as_tensor(lengths, dtype=torch.long)
