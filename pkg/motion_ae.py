"""Convolutional motion autoencoder: (L, 76) frames <-> (L // 4, d) latents."""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import InvalidInputError, ShapeMismatchError, TooShortError
from motion_features import FEATURE_DIM, MotionSequence, bone_lengths_torch
from optimization import ensure_finite_loss, optimizer_step

logger = logging.getLogger(__name__)

DOWNSAMPLE = 4


@dataclass(frozen=True, eq=False)
class LatentSequence:
    latents: np.ndarray

    def __post_init__(self):
        latents = np.asarray(self.latents)
        if latents.ndim != 2 or latents.shape[0] < 1:
            raise ShapeMismatchError(f'latents must be (T >= 1, d), got {latents.shape}')
        if not np.all(np.isfinite(latents)):
            raise InvalidInputError('latents must be finite')
        object.__setattr__(self, 'latents', latents)

    @property
    def length(self):
        return self.latents.shape[0]

    @property
    def dim(self):
        return self.latents.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LatentSequence):
            return NotImplemented
        return self.latents.dtype == other.latents.dtype and np.array_equal(self.latents, other.latents)

    __hash__ = object.__hash__


class ResBlock(nn.Module):
    def __init__(self, width, padding_mode='zeros'):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=1, padding_mode=padding_mode)
        self.conv2 = nn.Conv1d(width, width, 3, padding=1, padding_mode=padding_mode)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class MotionAE(nn.Module):
    """Two stride-2 stages each way. ``padding_mode='circular'`` only affects the encoder."""

    def __init__(self, feature_dim=FEATURE_DIM, width=128, latent_dim=64, res_blocks=2, padding_mode='zeros'):
        super().__init__()
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.register_buffer('mean', torch.zeros(feature_dim))
        self.register_buffer('std', torch.ones(feature_dim))
        self.register_buffer('trained_steps', torch.zeros((), dtype=torch.long))

        pm = padding_mode
        encoder = [nn.Conv1d(feature_dim, width, 3, padding=1, padding_mode=pm)]
        for _ in range(2):
            encoder.append(nn.Conv1d(width, width, 4, stride=2, padding=1, padding_mode=pm))
            encoder += [ResBlock(width, pm) for _ in range(res_blocks)]
        encoder.append(nn.Conv1d(width, latent_dim, 3, padding=1, padding_mode=pm))
        self.encoder = nn.Sequential(*encoder)

        decoder = [nn.Conv1d(latent_dim, width, 3, padding=1)]
        for _ in range(2):
            decoder += [ResBlock(width) for _ in range(res_blocks)]
            decoder.append(nn.ConvTranspose1d(width, width, 4, stride=2, padding=1))
        decoder.append(nn.Conv1d(width, feature_dim, 3, padding=1))
        self.decoder = nn.Sequential(*decoder)

    def set_stats(self, stats):
        self.mean.copy_(torch.as_tensor(stats.mean, dtype=self.mean.dtype))
        self.std.copy_(torch.as_tensor(stats.std, dtype=self.std.dtype))

    def normalize(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def denormalize(self, x):
        return x * self.std.to(x.dtype) + self.mean.to(x.dtype)

    def encode(self, x):
        """Normalized ``(B, L, F)`` -> ``(B, L // 4, d)``; trailing frames past 4*(L // 4) are dropped."""
        T = x.shape[1] // DOWNSAMPLE
        if T < 1:
            raise TooShortError(f'encoding needs at least {DOWNSAMPLE} frames, got {x.shape[1]}')
        x = x[:, :T * DOWNSAMPLE]
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def decode(self, z):
        """``(B, T, d)`` -> normalized ``(B, 4T, F)``."""
        return self.decoder(z.transpose(1, 2)).transpose(1, 2)

    def forward(self, x):
        return self.decode(self.encode(x))


def _dtype(model):
    return model.encoder[0].weight.dtype


def ae_encode(model, seq):
    if seq.length < DOWNSAMPLE:
        raise TooShortError(f'encoding needs at least {DOWNSAMPLE} frames, got {seq.length}')
    x = torch.as_tensor(np.asarray(seq.frames), dtype=_dtype(model)).unsqueeze(0)
    with torch.no_grad():
        z = model.encode(model.normalize(x))[0]
    return LatentSequence(z.numpy().astype(np.float32))


def ae_decode(model, latents, target_length):
    T = latents.length
    if target_length // DOWNSAMPLE != T:
        raise InvalidInputError(f'target length {target_length} is incompatible with {T} latents')
    z = torch.as_tensor(latents.latents, dtype=_dtype(model)).unsqueeze(0)
    with torch.no_grad():
        frames = model.denormalize(model.decode(z))[0].numpy()
    pad = target_length - frames.shape[0]
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)
    return MotionSequence(frames.astype(np.float32))


def ae_loss(x_hat, x, mean, std, lambda_morph=1.0, mask=None):
    """Reconstruction loss on normalized ``(B, L, F)`` frames.

    Both terms are summed over their last axis per frame and averaged over valid frames;
    the morphological term compares bone lengths of the denormalized frames.
    """
    if x_hat.shape != x.shape:
        raise ShapeMismatchError(f'reconstruction shape {tuple(x_hat.shape)} != target {tuple(x.shape)}')
    if mask is None:
        mask = torch.ones(x.shape[:-1], dtype=torch.bool, device=x.device)
    weights = mask.to(x.dtype)
    count = weights.sum()
    if count == 0:
        raise InvalidInputError('loss mask selects no frames')

    mse = (((x_hat - x) ** 2).sum(dim=-1) * weights).sum() / count
    bones_hat = bone_lengths_torch(x_hat * std + mean)
    bones = bone_lengths_torch(x * std + mean)
    morph = (((bones_hat - bones) ** 2).sum(dim=-1) * weights).sum() / count
    return mse + lambda_morph * morph, mse, morph


def collate_motions(sequences, dtype=torch.float32):
    """Right-pad to a common length that is a multiple of 4 by repeating the last frame."""
    longest = max(s.length for s in sequences)
    padded_length = DOWNSAMPLE * math.ceil(longest / DOWNSAMPLE)
    x = np.empty((len(sequences), padded_length, FEATURE_DIM))
    mask = np.zeros((len(sequences), padded_length), dtype=bool)
    for i, s in enumerate(sequences):
        x[i, :s.length] = s.frames
        x[i, s.length:] = s.frames[-1]
        mask[i, :s.length] = True
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(mask)


def ae_train_step(model, optimizer, x, mask, lambda_morph=1.0, step=None):
    """One Adam step on a raw-feature batch ``x`` of shape ``(B, L, 76)`` with ``L % 4 == 0``."""
    xn = model.normalize(x)
    x_hat = model(xn)
    total, mse, morph = ae_loss(x_hat, xn, model.mean.to(x.dtype), model.std.to(x.dtype), lambda_morph, mask)
    metrics = ensure_finite_loss({'total': total, 'mse': mse, 'morph': morph}, 'ae', step)
    total.backward()
    optimizer_step(optimizer, 'ae', step)
    model.trained_steps += 1
    return metrics


def dump_latents(model, records, path):
    """Write each record's latents (T x d, float32) into an ``.npz`` keyed by record id."""
    arrays = {r.record_id: ae_encode(model, r.motion).latents for r in records}
    np.savez(path, **arrays)
    logger.info('dumped latents for %d records to %s', len(arrays), path)
    return arrays


def load_latents(path):
    with np.load(path) as data:
        return {key: LatentSequence(data[key]) for key in data.files}
