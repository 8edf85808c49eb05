"""Conditional graph VAE over bone-length vectors.

Nodes are the 24 bones; two bones are neighbours when they share a joint. The species
condition is projected once and concatenated to every node at every layer.
"""
import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import ShapeMismatchError
from optimization import ensure_finite_loss, optimizer_step
from skeleton import NUM_BONES, BoneLengthVector, canonical_topology, forward_kinematics_tpose

logger = logging.getLogger(__name__)


def bone_graph(topo=None):
    topo = topo or canonical_topology()
    edges = [set(edge) for edge in topo.bone_edges]
    n = len(edges)
    adjacency = np.zeros((n, n))
    for e in range(n):
        for f in range(n):
            if e == f or edges[e] & edges[f]:
                adjacency[e, f] = 1.0
    return adjacency


def normalized_adjacency(adjacency):
    """D^-1/2 A D^-1/2 for an adjacency that already carries self-loops."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    d = adjacency.sum(axis=1) ** -0.5
    return d[:, None] * adjacency * d[None, :]


def gcn_layer(x, adjacency, weight, bias=None, activation=True):
    """One propagation step ``act(Â X W + b)`` on ``(..., N, F_in)`` node features."""
    n = adjacency.shape[0]
    if adjacency.shape != (n, n):
        raise ShapeMismatchError(f'adjacency must be square, got {tuple(adjacency.shape)}')
    if x.shape[-2] != n:
        raise ShapeMismatchError(f'node features have {x.shape[-2]} nodes, adjacency has {n}')
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatchError(f'feature width {x.shape[-1]} does not match weight rows {weight.shape[0]}')
    out = adjacency @ x @ weight
    if bias is not None:
        out = out + bias
    return F.softplus(out) if activation else out


class GraphLayer(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x, adjacency, activation=True):
        return gcn_layer(x, adjacency, self.weight, self.bias, activation)


class CGAE(nn.Module):
    def __init__(self, cond_dim=64, latent_dim=16, hidden=64, cond_features=16, topo=None):
        super().__init__()
        self.cond_dim = cond_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        adjacency = normalized_adjacency(bone_graph(topo))
        self.register_buffer('adjacency', torch.as_tensor(adjacency, dtype=torch.float32))
        self.register_buffer('trained_steps', torch.zeros((), dtype=torch.long))

        self.cond_proj = nn.Linear(cond_dim, cond_features)
        self.enc1 = GraphLayer(1 + cond_features, hidden)
        self.enc2 = GraphLayer(hidden + cond_features, hidden)
        self.mu_head = nn.Linear(NUM_BONES * hidden, latent_dim)
        self.logvar_head = nn.Linear(NUM_BONES * hidden, latent_dim)

        self.dec_in = nn.Linear(latent_dim + cond_features, NUM_BONES * hidden)
        self.dec1 = GraphLayer(hidden + cond_features, hidden)
        self.dec2 = GraphLayer(hidden + cond_features, 1)

    def _with_condition(self, nodes, cond):
        expanded = cond.unsqueeze(-2).expand(*nodes.shape[:-1], cond.shape[-1])
        return torch.cat([nodes, expanded], dim=-1)

    def encode(self, b, c):
        cond = self.cond_proj(c)
        adjacency = self.adjacency.to(b.dtype)
        x = self._with_condition(b.unsqueeze(-1), cond)
        x = self.enc1(x, adjacency)
        x = self.enc2(self._with_condition(x, cond), adjacency)
        flat = x.flatten(start_dim=-2)
        return self.mu_head(flat), self.logvar_head(flat)

    @staticmethod
    def reparameterize(mu, logvar, noise):
        return mu + torch.exp(0.5 * logvar) * noise

    def decode(self, z, c):
        cond = self.cond_proj(c)
        adjacency = self.adjacency.to(z.dtype)
        x = F.softplus(self.dec_in(torch.cat([z, cond], dim=-1)))
        x = x.reshape(*x.shape[:-1], NUM_BONES, self.hidden)
        x = self.dec1(self._with_condition(x, cond), adjacency)
        x = self.dec2(self._with_condition(x, cond), adjacency, activation=False)
        return F.softplus(x.squeeze(-1))


def kl_divergence(mu, logvar):
    return 0.5 * torch.sum(torch.exp(logvar) + mu ** 2 - 1.0 - logvar, dim=-1)


def cgae_loss(model, b, c, noise, beta=1e-3):
    """(total, recon, kl), each averaged over the leading batch axis."""
    mu, logvar = model.encode(b, c)
    z = model.reparameterize(mu, logvar, noise)
    b_hat = model.decode(z, c)
    recon = torch.sum((b_hat - b) ** 2, dim=-1).mean()
    kl = kl_divergence(mu, logvar).mean()
    return recon + beta * kl, recon, kl


def cgae_train_step(model, optimizer, b, c, generator, beta=1e-3, step=None):
    noise = torch.randn(b.shape[0], model.latent_dim, generator=generator, dtype=b.dtype)
    total, recon, kl = cgae_loss(model, b, c, noise, beta)
    metrics = ensure_finite_loss({'total': total, 'recon': recon, 'kl': kl}, 'cgae', step)
    total.backward()
    optimizer_step(optimizer, 'cgae', step)
    model.trained_steps += 1
    return metrics


def _condition_tensor(c, dtype):
    vector = c.vector if hasattr(c, 'vector') else c
    return torch.as_tensor(np.asarray(vector), dtype=dtype).reshape(1, -1)


def sample_bone_lengths(model, c, seed):
    if int(model.trained_steps) == 0:
        logger.warning('sampling a T-pose from an untrained CGAE')
    dtype = model.mu_head.weight.dtype
    generator = torch.Generator().manual_seed(int(seed))
    z = torch.randn(1, model.latent_dim, generator=generator, dtype=dtype)
    with torch.no_grad():
        b = model.decode(z, _condition_tensor(c, dtype))[0]
    return BoneLengthVector(b.double().numpy())


def sample_tpose(model, c, seed, topo=None):
    return forward_kinematics_tpose(sample_bone_lengths(model, c, seed), topo or canonical_topology())


def reconstruct_mean(model, b, c):
    """Decode the posterior mean; used to check reconstruction after training."""
    dtype = model.mu_head.weight.dtype
    b_tensor = torch.as_tensor(np.asarray(b.lengths), dtype=dtype).reshape(1, -1)
    cond = _condition_tensor(c, dtype)
    with torch.no_grad():
        mu, _ = model.encode(b_tensor, cond)
        return model.decode(mu, cond)[0].double().numpy()
