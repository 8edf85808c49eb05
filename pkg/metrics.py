"""Evaluation metrics and the toy text-motion matcher whose feature space they use."""
import logging

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import linalg
from torch import nn

from errors import InvalidInputError, ShapeMismatchError
from motion_ae import ae_decode, ae_encode, collate_motions
from motion_features import FEATURE_DIM, bone_lengths_per_frame, local_frames
from optimization import ensure_finite_loss, make_optimizer, optimizer_step

logger = logging.getLogger(__name__)

FID_EPS = 1e-6
DEFAULT_POOL_SIZE = 32


def mme(seq, b, topo=None):
    """Mean absolute per-frame, per-bone deviation from the canonical lengths ``b``."""
    lengths = b.lengths if hasattr(b, 'lengths') else np.asarray(b, dtype=np.float64)
    return float(np.mean(np.abs(bone_lengths_per_frame(seq, topo) - lengths)))


def _check_feats(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeMismatchError(f'features must be (n, d), got {a.shape}')
        if not np.all(np.isfinite(a)):
            raise InvalidInputError('features must be finite')
        out.append(a)
    return out


def gaussian_stats(feats):
    (feats,) = _check_feats(feats)
    if feats.shape[0] < 2:
        raise InvalidInputError('need at least 2 samples for a covariance')
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def _psd_sqrt(matrix):
    w, v = linalg.eigh(matrix)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps=FID_EPS):
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    for x in (mu_a, mu_b, cov_a, cov_b):
        if not np.all(np.isfinite(x)):
            raise InvalidInputError('Frechet distance inputs must be finite')
    eye = np.eye(cov_a.shape[0])
    cov_a = cov_a + eps * eye
    cov_b = cov_b + eps * eye

    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    trace_sqrt = np.sum(np.sqrt(np.clip(linalg.eigh(middle, eigvals_only=True), 0.0, None)))

    diff = mu_a - mu_b
    distance = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt
    return max(float(distance), 0.0)


def fid(feats_a, feats_b):
    mu_a, cov_a = gaussian_stats(feats_a)
    mu_b, cov_b = gaussian_stats(feats_b)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def r_precision_curve(motion_feats, text_feats, top_k=3, pool_size=DEFAULT_POOL_SIZE, rng=None):
    """Top-1..Top-k retrieval accuracy of each text against its own motion plus pool_size - 1 distractors."""
    motion_feats, text_feats = _check_feats(motion_feats, text_feats)
    n = motion_feats.shape[0]
    if text_feats.shape != motion_feats.shape:
        raise ShapeMismatchError('motion and text features must be aligned row for row')
    if n < pool_size:
        raise InvalidInputError(f'R-precision needs at least {pool_size} pairs, got {n}')
    if not 1 <= top_k <= pool_size:
        raise InvalidInputError(f'top_k must be in 1..{pool_size}, got {top_k}')
    rng = rng if rng is not None else np.random.default_rng(0)

    hits = np.zeros(top_k)
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)
        pool = np.concatenate([[i], others])
        dists = np.linalg.norm(motion_feats[pool] - text_feats[i], axis=1)
        rank = int(np.flatnonzero(np.argsort(dists, kind='stable') == 0)[0])
        hits[rank:] += 1 if rank < top_k else 0
    return hits / n


def r_precision(motion_feats, text_feats, k, pool_size=DEFAULT_POOL_SIZE, rng=None):
    return float(r_precision_curve(motion_feats, text_feats, k, pool_size, rng)[k - 1])


def mm_dist(motion_feats, text_feats):
    motion_feats, text_feats = _check_feats(motion_feats, text_feats)
    if motion_feats.shape != text_feats.shape:
        raise ShapeMismatchError('motion and text features must be aligned row for row')
    return float(np.mean(np.linalg.norm(motion_feats - text_feats, axis=1)))


def diversity(motion_feats, num_pairs, rng=None, pairs=None):
    """Mean distance over ``num_pairs`` disjoint random pairs (or explicit ``pairs``)."""
    (motion_feats,) = _check_feats(motion_feats)
    if pairs is None:
        if num_pairs < 1:
            raise InvalidInputError(f'diversity needs at least one pair, got num_pairs={num_pairs}')
        if motion_feats.shape[0] < 2 * num_pairs:
            raise InvalidInputError(f'diversity needs at least {2 * num_pairs} samples, got {motion_feats.shape[0]}')
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = rng.permutation(motion_feats.shape[0])[:2 * num_pairs]
        first, second = picked[:num_pairs], picked[num_pairs:]
    else:
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        if len(pairs) == 0:
            raise InvalidInputError('diversity needs at least one pair')
        first, second = pairs[:, 0], pairs[:, 1]
    return float(np.mean(np.linalg.norm(motion_feats[first] - motion_feats[second], axis=1)))


def seam_continuity(seq, seams):
    """Largest joint jump across any seam frame over the median frame-to-frame jump elsewhere.

    ``seams`` lists frame indices t where the step t -> t + 1 crosses a seam.
    """
    joints = local_frames(seq)
    jumps = np.linalg.norm(np.diff(joints, axis=0), axis=-1).max(axis=-1)
    seams = np.asarray(sorted(set(int(t) for t in seams)), dtype=int)
    if seams.size == 0:
        raise InvalidInputError('seam_continuity needs at least one seam')
    if seams[0] < 0 or seams[-1] >= len(jumps):
        raise InvalidInputError(f'seams must lie in [0, {len(jumps) - 1}], got {seams.tolist()}')
    interior = np.setdiff1d(np.arange(len(jumps)), seams)
    if interior.size == 0:
        raise InvalidInputError('every frame step is a seam; nothing to compare against')
    median = float(np.median(jumps[interior]))
    worst = float(jumps[seams].max())
    return worst / median if median > 0 else float('inf')


# --- toy matcher ---------------------------------------------------------------------

class ToyMatcher(nn.Module):
    """Frame MLP + masked mean pool for motions, MLP for sentence vectors; unit-norm outputs."""

    def __init__(self, text_dim=64, feature_dim=64, hidden=128):
        super().__init__()
        self.register_buffer('mean', torch.zeros(FEATURE_DIM))
        self.register_buffer('std', torch.ones(FEATURE_DIM))
        self.frame_mlp = nn.Sequential(nn.Linear(FEATURE_DIM, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.motion_out = nn.Linear(hidden, feature_dim)
        self.text_mlp = nn.Sequential(nn.Linear(text_dim, hidden), nn.SiLU(), nn.Linear(hidden, feature_dim))

    def set_stats(self, stats):
        self.mean.copy_(torch.as_tensor(stats.mean, dtype=self.mean.dtype))
        self.std.copy_(torch.as_tensor(stats.std, dtype=self.std.dtype))

    def encode_motion(self, x, mask=None):
        h = self.frame_mlp((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))
        if mask is None:
            pooled = h.mean(dim=1)
        else:
            w = mask.to(h.dtype).unsqueeze(-1)
            pooled = (h * w).sum(dim=1) / w.sum(dim=1)
        return F.normalize(self.motion_out(pooled), dim=-1)

    def encode_text(self, sentence):
        return F.normalize(self.text_mlp(sentence), dim=-1)


def contrastive_loss(motion_emb, text_emb, temperature=0.07):
    logits = motion_emb @ text_emb.T / temperature
    labels = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def matcher_train_step(matcher, optimizer, x, mask, sentences, temperature=0.07, step=None):
    loss = contrastive_loss(matcher.encode_motion(x, mask), matcher.encode_text(sentences), temperature)
    metrics = ensure_finite_loss({'total': loss}, 'matcher', step)
    loss.backward()
    optimizer_step(optimizer, 'matcher', step)
    return metrics


def train_toy_matcher(records, text_provider, stats=None, steps=1000, batch_size=32, lr=1e-3,
                      temperature=0.07, seed=0, hidden=128, feature_dim=64, step_logger=None):
    """Fit a fresh ToyMatcher on (motion, caption) pairs; one random caption per record per step."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    matcher = ToyMatcher(text_provider.dim, feature_dim, hidden)
    if stats is not None:
        matcher.set_stats(stats)
    optimizer = make_optimizer(matcher.parameters(), lr)
    for step in range(steps):
        picked = rng.choice(len(records), size=min(batch_size, len(records)), replace=False)
        batch = [records[i] for i in picked]
        x, mask = collate_motions([r.motion for r in batch])
        captions = [r.captions[rng.integers(len(r.captions))] for r in batch]
        sentences = torch.as_tensor(
            np.stack([text_provider.text_features(c).sentence for c in captions]), dtype=torch.float32)
        metrics = matcher_train_step(matcher, optimizer, x, mask, sentences, temperature, step)
        if step_logger is not None:
            step_logger.log(step, **metrics)
    return matcher


def embed_motions(matcher, sequences, batch_size=64):
    chunks = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            x, mask = collate_motions(sequences[start:start + batch_size])
            chunks.append(matcher.encode_motion(x, mask).double().numpy())
    return np.concatenate(chunks, axis=0)


def embed_captions(matcher, text_provider, captions):
    sentences = torch.as_tensor(np.stack([text_provider.text_features(c).sentence for c in captions]),
                                dtype=torch.float32)
    with torch.no_grad():
        return matcher.encode_text(sentences).double().numpy()


# --- reports -------------------------------------------------------------------------

def _retrieval_block(motion_emb, text_emb, pool_size, top_k, seed):
    n = motion_emb.shape[0]
    if n < pool_size:
        logger.warning('only %d samples; skipping R-precision (pool size %d)', n, pool_size)
        return {f'top{k}': None for k in range(1, top_k + 1)}
    curve = r_precision_curve(motion_emb, text_emb, top_k, pool_size, np.random.default_rng(seed))
    return {f'top{k}': float(curve[k - 1]) for k in range(1, top_k + 1)}


def evaluate_generation(generated, real_motions, matcher, text_provider, pool_size=DEFAULT_POOL_SIZE,
                        top_k=3, diversity_pairs=100, seed=0, topo=None):
    """Metric suite over ``generated``: a list of ``(MotionSequence, caption, reference lengths)``."""
    motions = [g[0] for g in generated]
    captions = [g[1] for g in generated]
    gen_emb = embed_motions(matcher, motions)
    text_emb = embed_captions(matcher, text_provider, captions)
    real_emb = embed_motions(matcher, real_motions)
    pairs = min(diversity_pairs, len(motions) // 2)

    report = {
        'mme': float(np.mean([mme(m, b, topo) for m, _, b in generated])),
        'fid': fid(gen_emb, real_emb),
        'r_precision': _retrieval_block(gen_emb, text_emb, pool_size, top_k, seed),
        'mm_dist': mm_dist(gen_emb, text_emb),
        'diversity': diversity(gen_emb, pairs, np.random.default_rng(seed)) if pairs >= 1 else None,
        'config': {'samples': len(generated), 'pool_size': pool_size, 'diversity_pairs': pairs, 'seed': seed},
    }
    return report


def evaluate_reconstruction(ae, records, matcher, text_provider, seed=0, topo=None):
    """AE round trip of each record scored against the original motions."""
    recon = []
    mse = []
    for r in records:
        out = ae_decode(ae, ae_encode(ae, r.motion), r.length)
        recon.append(out)
        xn = (np.asarray(r.motion.frames, dtype=np.float64) - ae.mean.double().numpy()) / ae.std.double().numpy()
        xn_hat = (np.asarray(out.frames, dtype=np.float64) - ae.mean.double().numpy()) / ae.std.double().numpy()
        mse.append(float(np.mean(np.sum((xn_hat - xn) ** 2, axis=1))))
    captions = [r.captions[0] for r in records]
    recon_emb = embed_motions(matcher, recon)
    real_emb = embed_motions(matcher, [r.motion for r in records])
    text_emb = embed_captions(matcher, text_provider, captions)
    return {
        'mse': float(np.mean(mse)),
        'mme': float(np.mean([mme(m, r.tpose_bone_lengths, topo) for m, r in zip(recon, records)])),
        'fid': fid(recon_emb, real_emb),
        'mm_dist': mm_dist(recon_emb, text_emb),
        'config': {'samples': len(records), 'seed': seed},
    }


def flatten_report(report, prefix=''):
    flat = {}
    for key, value in report.items():
        if key == 'config':
            continue
        name = f'{prefix}{key}'
        if isinstance(value, dict):
            flat.update(flatten_report(value, f'{name}.'))
        elif value is not None:
            flat[name] = float(value)
    return flat


def aggregate_repeats(reports):
    """Mean, std and 95% normal half width (1.96 * std / sqrt(n)) per metric across repeats."""
    table = pd.DataFrame([flatten_report(r) for r in reports])
    n = len(table)
    summary = pd.DataFrame({
        'mean': table.mean(),
        'std': table.std(ddof=1) if n > 1 else table.mean() * 0.0,
    })
    summary['ci95'] = 1.96 * summary['std'] / np.sqrt(n)
    summary['repeats'] = n
    return summary
