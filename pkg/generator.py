"""Masked latent generator with a flow-matching completion head.

A transformer reads ``[T-pose token; latents with masked rows replaced by [M]]`` and
cross-attends to ``[sentence; words]`` text tokens. A small velocity MLP, conditioned
on each motion row of the context, transports Gaussian noise to the clean latent of
every masked position. Inference unmasks positions over R rounds with classifier-free
guidance and an N-step Euler solver.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cgae import sample_tpose
from embeddings import NullTextCondition
from errors import ConfigError, InvalidInputError, TooShortError
from mcm import morph_guide_loss
from motion_ae import DOWNSAMPLE, LatentSequence, ae_decode, ae_encode
from optimization import ensure_finite_loss, optimizer_step
from skeleton import NUM_JOINTS

logger = logging.getLogger(__name__)

TPOSE_DIM = NUM_JOINTS * 3


@dataclass(frozen=True)
class MaskSet:
    """Masked latent positions, 1-based; position 0 is the T-pose token and never masked."""
    positions: frozenset
    length: int

    def __post_init__(self):
        positions = frozenset(int(p) for p in self.positions)
        bad = [p for p in positions if not 1 <= p <= self.length]
        if bad:
            raise InvalidInputError(f'mask positions out of range 1..{self.length}: {sorted(bad)}')
        object.__setattr__(self, 'positions', positions)

    def __len__(self):
        return len(self.positions)

    def as_bool(self):
        out = np.zeros(self.length, dtype=bool)
        out[[p - 1 for p in self.positions]] = True
        return out

    @classmethod
    def from_bool(cls, flags):
        flags = np.asarray(flags, dtype=bool)
        return cls(frozenset(int(i) + 1 for i in np.flatnonzero(flags)), len(flags))


def sample_training_mask(T, rng):
    if T < 1:
        raise InvalidInputError(f'cannot mask an empty latent sequence (T={T})')
    ratio = rng.uniform(0.5, 1.0)
    count = min(T, max(1, math.ceil(ratio * T)))
    chosen = rng.choice(T, size=count, replace=False) + 1
    return MaskSet(frozenset(chosen.tolist()), T)


def sinusoidal_embedding(x, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Block(nn.Module):
    """Pre-norm self-attention over motion rows, cross-attention to text, feed-forward."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, text, motion_pad=None, text_pad=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, key_padding_mask=motion_pad, need_weights=False)[0]
        h = self.norm2(x)
        x = x + self.cross_attn(h, text, text, key_padding_mask=text_pad, need_weights=False)[0]
        return x + self.ff(self.norm3(x))


class VelocityMLP(nn.Module):
    def __init__(self, dim, hidden=128, blocks=2):
        super().__init__()
        self.dim = dim
        self.z_in = nn.Linear(dim, hidden)
        self.time = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.cond = nn.Linear(dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.LayerNorm(hidden), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            for _ in range(blocks)
        )
        self.out = nn.Sequential(nn.LayerNorm(hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, z_tau, tau, h):
        tau = torch.as_tensor(tau, dtype=z_tau.dtype, device=z_tau.device).expand(z_tau.shape[:-1])
        x = self.z_in(z_tau) + self.time(sinusoidal_embedding(1000.0 * tau, self.dim)) + self.cond(h)
        for block in self.blocks:
            x = x + block(x)
        return self.out(x)


class MaskedGenerator(nn.Module):
    def __init__(self, latent_dim=64, text_dim=64, num_blocks=4, num_heads=4, velocity_hidden=128,
                 velocity_blocks=2, use_word_features=True, use_tpose_prior=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.text_dim = text_dim
        self.use_word_features = use_word_features
        self.use_tpose_prior = use_tpose_prior
        self.register_buffer('trained_steps', torch.zeros((), dtype=torch.long))

        self.mask_token = nn.Parameter(0.02 * torch.randn(latent_dim))
        self.tpose_proj = nn.Linear(TPOSE_DIM, latent_dim)
        self.text_proj = nn.Linear(text_dim, latent_dim)
        self.blocks = nn.ModuleList(Block(latent_dim, num_heads) for _ in range(num_blocks))
        self.final_norm = nn.LayerNorm(latent_dim)
        self.velocity = VelocityMLP(latent_dim, velocity_hidden, velocity_blocks)
        self.null = NullTextCondition(text_dim)

    @property
    def dtype(self):
        return self.mask_token.dtype

    def null_tokens(self, width):
        """Null ``[s; w]`` padded to ``width`` rows, plus its padding mask."""
        features = self.null.null_text_features()
        tokens = torch.cat([features.sentence.unsqueeze(0), features.words], dim=0)
        tokens = F.pad(tokens, (0, 0, 0, width - tokens.shape[0]))
        pad = torch.arange(width) >= 2
        return tokens, pad

    def condition_tokens(self, text_tokens, text_pad, drop):
        """Swap the text condition of samples flagged in ``drop`` for the null condition."""
        null_tokens, null_pad = self.null_tokens(text_tokens.shape[1])
        tokens = torch.where(drop[:, None, None], null_tokens.to(text_tokens.dtype), text_tokens)
        pad = torch.where(drop[:, None], null_pad, text_pad)
        return tokens, pad

    def input_rows(self, z, mask, tpose):
        """Transformer input before positional encoding: row 0 is the T-pose token."""
        motion = torch.where(mask.unsqueeze(-1), self.mask_token.expand_as(z), z)
        if not self.use_tpose_prior:
            tpose = torch.zeros_like(tpose)
        prefix = self.tpose_proj(tpose).unsqueeze(1)
        return torch.cat([prefix, motion], dim=1)

    def build_context(self, z, mask, tpose, text_tokens, text_pad=None, valid=None):
        """``H`` of shape ``(B, T + 1, d)``."""
        x = self.input_rows(z, mask, tpose)
        positions = torch.arange(x.shape[1], dtype=x.dtype, device=x.device)
        x = x + sinusoidal_embedding(positions, self.latent_dim)

        text = self.text_proj(text_tokens)
        if not self.use_word_features:
            text = text[:, :1]
            text_pad = text_pad[:, :1] if text_pad is not None else None
        motion_pad = None
        if valid is not None:
            prefix = torch.zeros(valid.shape[0], 1, dtype=torch.bool, device=valid.device)
            motion_pad = torch.cat([prefix, ~valid], dim=1)
        for block in self.blocks:
            x = block(x, text, motion_pad, text_pad)
        return self.final_norm(x)


@dataclass
class GenBatch:
    latents: torch.Tensor
    valid: torch.Tensor
    lengths: torch.Tensor
    tpose: torch.Tensor
    text_tokens: torch.Tensor
    text_pad: torch.Tensor
    bone_lengths: torch.Tensor


def collate_text(features, dtype=torch.float32):
    width = max(2, max(1 + f.num_words for f in features))
    tokens = torch.zeros(len(features), width, features[0].dim, dtype=dtype)
    pad = torch.ones(len(features), width, dtype=torch.bool)
    for i, f in enumerate(features):
        rows = f.tokens(dtype)
        tokens[i, :rows.shape[0]] = rows
        pad[i, :rows.shape[0]] = False
    return tokens, pad


def collate_generator_batch(latent_list, tposes, texts, bone_lengths, dtype=torch.float32):
    lengths = [z.length for z in latent_list]
    longest = max(lengths)
    z = np.zeros((len(latent_list), longest, latent_list[0].dim))
    valid = np.zeros((len(latent_list), longest), dtype=bool)
    for i, latents in enumerate(latent_list):
        z[i, :latents.length] = latents.latents
        valid[i, :latents.length] = True
    tokens, pad = collate_text(texts, dtype)
    return GenBatch(
        latents=torch.as_tensor(z, dtype=dtype),
        valid=torch.as_tensor(valid),
        lengths=torch.as_tensor(lengths, dtype=torch.long),
        tpose=torch.as_tensor(np.stack([t.flatten() for t in tposes]), dtype=dtype),
        text_tokens=tokens,
        text_pad=pad,
        bone_lengths=torch.as_tensor(np.stack([b.lengths for b in bone_lengths]), dtype=dtype),
    )


def _flow_terms(model, z, noise, tau, H, velocity_fn=None):
    tau_b = tau.unsqueeze(-1)
    z_tau = (1.0 - tau_b) * noise + tau_b * z
    velocity_fn = velocity_fn or model.velocity
    return z_tau, velocity_fn(z_tau, tau, H[:, 1:])


def flow_loss(model, z, mask, noise, tau, H, velocity_fn=None, terms=None):
    """Mean over masked positions of ``||v(z_tau, tau, h) - (z - noise)||^2``; 0 if nothing is masked.

    ``terms`` reuses an already computed ``(z_tau, v)`` pair from ``_flow_terms``.
    """
    if not bool(mask.any()):
        return z.new_zeros(())
    _, v = terms if terms is not None else _flow_terms(model, z, noise, tau, H, velocity_fn)
    err = torch.sum((v - (z - noise)) ** 2, dim=-1)
    weights = mask.to(err.dtype)
    return (err * weights).sum() / weights.sum()


def predicted_clean_latents(model, z, mask, noise, tau, H, velocity_fn=None, terms=None):
    """One Euler step from ``tau`` to 1 on masked rows; unmasked rows are the detached targets."""
    z_tau, v = terms if terms is not None else _flow_terms(model, z, noise, tau, H, velocity_fn)
    clean = z_tau + (1.0 - tau).unsqueeze(-1) * v
    return torch.where(mask.unsqueeze(-1), clean, z.detach())


def gen_total_loss(model, batch, mask, noise, tau, mcm=None, lambda_morph_guide=0.1,
                   text_tokens=None, text_pad=None, velocity_fn=None):
    """(total, flow, morph_guide) for one batch and one draw of mask/noise/tau."""
    if lambda_morph_guide > 0 and mcm is None:
        raise ConfigError('lambda_morph_guide > 0 needs a pretrained MCM')
    text_tokens = batch.text_tokens if text_tokens is None else text_tokens
    text_pad = batch.text_pad if text_pad is None else text_pad
    H = model.build_context(batch.latents, mask, batch.tpose, text_tokens, text_pad, batch.valid)

    z = batch.latents
    terms = _flow_terms(model, z, noise, tau, H, velocity_fn)
    flow = flow_loss(model, z, mask, noise, tau, H, terms=terms)

    if lambda_morph_guide > 0:
        clean = predicted_clean_latents(model, z, mask, noise, tau, H, terms=terms)
        morph = morph_guide_loss(mcm, clean, z, mask, batch.bone_lengths, batch.lengths)
    else:
        morph = z.new_zeros(())
    return flow + lambda_morph_guide * morph, flow, morph


def sample_batch_masks(lengths, width, rng):
    mask = np.zeros((len(lengths), width), dtype=bool)
    for i, T in enumerate(lengths):
        mask[i, :T] = sample_training_mask(int(T), rng).as_bool()
    return torch.as_tensor(mask)


def gen_train_step(model, optimizer, batch, rng, generator, mcm=None, lambda_morph_guide=0.1,
                   cond_drop_prob=0.1, step=None):
    dtype = batch.latents.dtype
    B, T = batch.valid.shape
    mask = sample_batch_masks(batch.lengths.tolist(), T, rng)
    noise = torch.randn(batch.latents.shape, generator=generator, dtype=dtype)
    tau = torch.rand((B, T), generator=generator, dtype=dtype)
    drop = torch.rand(B, generator=generator, dtype=dtype) < cond_drop_prob
    tokens, pad = model.condition_tokens(batch.text_tokens, batch.text_pad, drop)

    total, flow, morph = gen_total_loss(model, batch, mask, noise, tau, mcm, lambda_morph_guide, tokens, pad)
    metrics = ensure_finite_loss({'total': total, 'flow': flow, 'morph_guide': morph}, 'gen', step)
    total.backward()
    optimizer_step(optimizer, 'gen', step)
    model.trained_steps += 1
    metrics['dropped'] = int(drop.sum())
    return metrics


# --- inference ---------------------------------------------------------------------

def cfg_velocity(v_cond, v_uncond, omega):
    if omega == 1:
        return v_cond
    if omega == 0:
        return v_uncond
    return v_uncond + omega * (v_cond - v_uncond)


def remaining_masked_schedule(T, R):
    """Masked counts before round 1 and after each of R rounds; every round fills at least one."""
    counts = [T]
    for r in range(1, R + 1):
        target = math.floor(T * math.cos(math.pi * r / (2 * R)) + 0.5)
        counts.append(max(R - r, min(counts[-1] - 1, target)))
    counts[-1] = 0
    return counts


def euler_integrate(z0, velocity_fn, N):
    """Integrate ``dz/dtau = v(z, tau)`` from 0 to 1 with N equal steps."""
    dt = 1.0 / N
    z = z0
    for k in range(N):
        z = z + dt * velocity_fn(z, k * dt)
    return z


def infer(model, text, tpose, T, R=8, N=16, omega=3.0, seed=0, prefilled=None, fill_mask=None,
          return_trace=False):
    """Fill masked latent positions over R rounds.

    Without ``prefilled`` every position starts as ``[M]``. With ``prefilled``
    (a ``(T, d)`` array) only the positions flagged in ``fill_mask`` are generated; the
    rest are copied through untouched.
    """
    if T < 1:
        raise TooShortError(f'T must be >= 1, got {T}')
    if R < 1 or N < 1:
        raise InvalidInputError(f'R and N must be >= 1, got R={R}, N={N}')
    if int(model.trained_steps) == 0:
        logger.warning('running inference with an untrained generator')

    dtype = model.dtype
    if fill_mask is None:
        fill_mask = np.ones(T, dtype=bool)
    fill_mask = np.asarray(fill_mask, dtype=bool)
    targets = np.flatnonzero(fill_mask)
    M = len(targets)
    if M == 0:
        raise InvalidInputError('nothing to generate: fill_mask is empty')
    if R > M:
        logger.warning('R=%d exceeds %d positions to fill; clamping', R, M)
        R = M

    z = torch.zeros(1, T, model.latent_dim, dtype=dtype)
    if prefilled is not None:
        z[0] = torch.as_tensor(np.asarray(prefilled), dtype=dtype)
    mask = torch.as_tensor(fill_mask).unsqueeze(0).clone()

    generator = torch.Generator().manual_seed(int(seed))
    order = targets[torch.randperm(M, generator=generator).numpy()]
    counts = remaining_masked_schedule(M, R)

    tpose_row = torch.as_tensor(tpose.flatten(), dtype=dtype).unsqueeze(0)
    cond_tokens = text.tokens(dtype).unsqueeze(0)
    null_tokens, null_pad = model.null_tokens(2)
    null_tokens, null_pad = null_tokens.unsqueeze(0).to(dtype), null_pad.unsqueeze(0)

    trace = []
    filled = 0
    with torch.no_grad():
        for r in range(1, R + 1):
            count = counts[r - 1] - counts[r]
            positions = torch.as_tensor(order[filled:filled + count], dtype=torch.long)
            filled += count

            H_cond = model.build_context(z, mask, tpose_row, cond_tokens)
            h_cond = H_cond[0, 1 + positions]
            if omega != 1:
                H_uncond = model.build_context(z, mask, tpose_row, null_tokens, null_pad)
                h_uncond = H_uncond[0, 1 + positions]

            def velocity_fn(zz, tau):
                v_cond = model.velocity(zz, tau, h_cond)
                if omega == 1:
                    return v_cond
                return cfg_velocity(v_cond, model.velocity(zz, tau, h_uncond), omega)

            z0 = torch.randn(count, model.latent_dim, generator=generator, dtype=dtype)
            z[0, positions] = euler_integrate(z0, velocity_fn, N)
            mask[0, positions] = False
            trace.append(positions.tolist())

    result = LatentSequence(z[0].numpy().astype(np.float32))
    return (result, trace) if return_trace else result


def generate_motion(models, caption, species_name, length, seed, R=8, N=16, omega=3.0, return_tpose=False):
    """Sample a species T-pose, fill ``length // 4`` latents, and decode ``length`` frames.

    ``models`` needs ``cgae``, ``ae``, ``generator``, ``species_provider`` and
    ``text_provider`` attributes.
    """
    T = length // DOWNSAMPLE
    if T < 1:
        raise TooShortError(f'length must be >= {DOWNSAMPLE}, got {length}')
    tpose = sample_tpose(models.cgae, models.species_provider.species_embed(species_name), seed)
    text = models.text_provider.text_features(caption)
    latents = infer(models.generator, text, tpose, T, R, N, omega, seed)
    motion = ae_decode(models.ae, latents, length)
    return (motion, tpose) if return_tpose else motion


def transition_latents(models, motion_a, motion_b, gap, caption, tpose_target, seed, R=8, N=16, omega=3.0):
    """``[encode(a); G x [M]; encode(b)]`` with only the G gap positions generated."""
    if gap < 1:
        raise InvalidInputError(f'gap must be >= 1 latent position, got {gap}')
    za = ae_encode(models.ae, motion_a).latents
    zb = ae_encode(models.ae, motion_b).latents
    T = za.shape[0] + gap + zb.shape[0]
    prefilled = np.zeros((T, za.shape[1]), dtype=np.float32)
    prefilled[:za.shape[0]] = za
    prefilled[za.shape[0] + gap:] = zb
    fill_mask = np.zeros(T, dtype=bool)
    fill_mask[za.shape[0]:za.shape[0] + gap] = True
    text = models.text_provider.text_features(caption)
    latents = infer(models.generator, text, tpose_target, T, R, N, omega, seed,
                    prefilled=prefilled, fill_mask=fill_mask)
    return latents, za.shape[0], zb.shape[0]


def cross_species_transition(models, motion_a, motion_b, gap, caption, tpose_target, seed, R=8, N=16, omega=3.0):
    latents, _, _ = transition_latents(models, motion_a, motion_b, gap, caption, tpose_target, seed, R, N, omega)
    return ae_decode(models.ae, latents, DOWNSAMPLE * latents.length)
