"""Unified checkpoint container (``UMCK``) and the model bundle it restores.

Layout: magic, u32 version, u32 header length, a compact sorted-key JSON header, then
the raw little-endian tensor bytes the header points into. Encoding is a pure function
of the tensors and header values, so save -> load -> save reproduces the same bytes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from cgae import CGAE
from config import RunConfig, run_config_from_dict
from embeddings import HashSpeciesProvider, HashTextProvider, SidecarSpeciesProvider, SidecarTextProvider
from errors import ConfigError, ContainerError, MagicMismatchError, TruncatedPayloadError, VersionMismatchError
from generator import MaskedGenerator
from mcm import MCM
from metrics import ToyMatcher
from motion_ae import MotionAE

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'UMCK'
CHECKPOINT_VERSION = 1
BLOCK_NAMES = ('ae', 'cgae', 'generator', 'matcher', 'mcm')

_DTYPES = {
    'float32': torch.float32,
    'float64': torch.float64,
    'int64': torch.int64,
    'int32': torch.int32,
    'bool': torch.bool,
}


@dataclass
class Checkpoint:
    config: dict
    step: int = 0
    blocks: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


class _Payload:
    def __init__(self):
        self.chunks = []
        self.size = 0

    def add(self, tensor):
        array = tensor.detach().cpu().contiguous().numpy()
        data = array.astype(array.dtype.newbyteorder('<'), copy=False).tobytes()
        entry = {'dtype': str(array.dtype), 'shape': list(array.shape), 'offset': self.size, 'nbytes': len(data)}
        self.chunks.append(data)
        self.size += len(data)
        return entry


def _read_tensor(payload, entry):
    start, end = entry['offset'], entry['offset'] + entry['nbytes']
    if end > len(payload):
        raise TruncatedPayloadError(f'tensor data ends at {end}, payload has {len(payload)} bytes')
    dtype = np.dtype(entry['dtype']).newbyteorder('<')
    array = np.frombuffer(payload[start:end], dtype=dtype).astype(entry['dtype']).reshape(entry['shape'])
    return torch.from_numpy(array.copy()).to(_DTYPES[entry['dtype']])


def _pack_optimizer(state_dict, payload):
    state = []
    for index in sorted(state_dict['state']):
        slots = state_dict['state'][index]
        packed = {}
        for name in sorted(slots):
            value = slots[name]
            packed[name] = {'tensor': payload.add(value)} if torch.is_tensor(value) else {'value': value}
        state.append([int(index), packed])
    return {'state': state, 'param_groups': state_dict['param_groups']}


def _unpack_optimizer(packed, payload):
    state = {}
    for index, slots in packed['state']:
        state[int(index)] = {
            name: _read_tensor(payload, slot['tensor']) if 'tensor' in slot else slot['value']
            for name, slot in slots.items()
        }
    return {'state': state, 'param_groups': packed['param_groups']}


def encode_checkpoint(ckpt):
    payload = _Payload()
    blocks = {}
    for name in sorted(ckpt.blocks):
        tensors = ckpt.blocks[name]
        if tensors is None:
            blocks[name] = {'present': False, 'tensors': {}}
            continue
        blocks[name] = {'present': True, 'tensors': {key: payload.add(tensors[key]) for key in sorted(tensors)}}
    optimizers = {name: _pack_optimizer(ckpt.optimizers[name], payload) for name in sorted(ckpt.optimizers)}
    header = {
        'config': ckpt.config,
        'step': int(ckpt.step),
        'meta': ckpt.meta,
        'blocks': blocks,
        'optimizers': optimizers,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return b''.join([CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header_bytes)),
                     header_bytes] + payload.chunks)


def decode_checkpoint(data):
    if len(data) < 12:
        raise TruncatedPayloadError('checkpoint shorter than its fixed header')
    if data[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f'expected magic {CHECKPOINT_MAGIC!r}, got {data[:4]!r}')
    version, header_len = struct.unpack('<II', data[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f'unsupported checkpoint version {version}')
    if 12 + header_len > len(data):
        raise TruncatedPayloadError('checkpoint header is truncated')
    try:
        header = json.loads(data[12:12 + header_len].decode('utf-8'))
    except ValueError as e:
        raise ContainerError(f'checkpoint header is not valid JSON: {e}') from e
    payload = data[12 + header_len:]

    try:
        blocks = {}
        for name, block in header['blocks'].items():
            if not block['present']:
                blocks[name] = None
                continue
            blocks[name] = {key: _read_tensor(payload, entry) for key, entry in block['tensors'].items()}
        optimizers = {name: _unpack_optimizer(packed, payload) for name, packed in header['optimizers'].items()}
        return Checkpoint(header['config'], header['step'], blocks, optimizers, header.get('meta', {}))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ContainerError(f'checkpoint header is malformed: {e!r}') from e


def save_checkpoint(path, ckpt):
    data = encode_checkpoint(ckpt)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info('saved checkpoint (%d bytes) to %s', len(data), path)
    return data


def load_checkpoint(path):
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def build_providers(cfg: RunConfig):
    """Species and text providers for a run: sidecar files when configured, hash stubs otherwise."""
    if cfg.species_sidecar:
        species = SidecarSpeciesProvider.from_file(cfg.species_sidecar)
    else:
        species = HashSpeciesProvider(cfg.embedding_seed, cfg.embedding_dim)
    if cfg.text_sidecar:
        text = SidecarTextProvider.from_file(cfg.text_sidecar)
    else:
        text = HashTextProvider(cfg.embedding_seed, cfg.embedding_dim)
    return species, text


class ModelBundle:
    """Every trainable module of a run plus the providers they were trained against.

    Any object with a ``dim`` matching ``embedding_dim`` and the ``species_embed`` /
    ``text_features`` methods can stand in for the configured providers.
    """

    def __init__(self, cfg: RunConfig, species_provider=None, text_provider=None):
        self.config = cfg
        torch.manual_seed(cfg.seed)
        self.cgae = CGAE(cfg.embedding_dim, cfg.cgae.latent_dim, cfg.cgae.hidden)
        self.ae = MotionAE(width=cfg.ae.width, latent_dim=cfg.ae.latent_dim, res_blocks=cfg.ae.res_blocks)
        self.mcm = MCM(cfg.ae.latent_dim, cfg.mcm.hidden)
        self.generator = MaskedGenerator(
            latent_dim=cfg.ae.latent_dim,
            text_dim=cfg.embedding_dim,
            num_blocks=cfg.gen.num_blocks,
            num_heads=cfg.gen.num_heads,
            velocity_hidden=cfg.gen.velocity_hidden,
            velocity_blocks=cfg.gen.velocity_blocks,
            use_word_features=cfg.gen.use_word_features,
            use_tpose_prior=cfg.gen.use_tpose_prior,
        )
        self.matcher = ToyMatcher(cfg.embedding_dim, cfg.matcher.feature_dim, cfg.matcher.hidden)
        if species_provider is None or text_provider is None:
            default_species, default_text = build_providers(cfg)
            species_provider = default_species if species_provider is None else species_provider
            text_provider = default_text if text_provider is None else text_provider
        for kind, provider in (('species', species_provider), ('text', text_provider)):
            if provider.dim != cfg.embedding_dim:
                raise ConfigError(f'{kind} provider has dim {provider.dim}, run expects embedding_dim '
                                  f'{cfg.embedding_dim}')
        self.species_provider = species_provider
        self.text_provider = text_provider
        self.present = set()
        self.optimizers = {}
        self.step = 0
        self.meta = {}

    def module(self, name):
        if name not in BLOCK_NAMES:
            raise ConfigError(f'unknown checkpoint block {name!r}')
        return getattr(self, name)

    def require(self, *names):
        missing = [n for n in names if n not in self.present]
        if missing:
            raise ConfigError(f'checkpoint is missing trained block(s): {missing}')

    def to_checkpoint(self):
        blocks = {name: (dict(self.module(name).state_dict()) if name in self.present else None)
                  for name in BLOCK_NAMES}
        return Checkpoint(self.config.to_dict(), self.step, blocks, dict(self.optimizers), dict(self.meta))

    def save(self, path):
        return save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt, species_provider=None, text_provider=None):
        bundle = cls(run_config_from_dict(ckpt.config), species_provider, text_provider)
        for name, tensors in ckpt.blocks.items():
            if tensors is None:
                continue
            bundle.module(name).load_state_dict(tensors)
            bundle.present.add(name)
        bundle.optimizers = dict(ckpt.optimizers)
        bundle.step = ckpt.step
        bundle.meta = dict(ckpt.meta)
        if 'mcm' in bundle.present:
            bundle.mcm.freeze()
        return bundle

    @classmethod
    def load(cls, path, species_provider=None, text_provider=None):
        return cls.from_checkpoint(load_checkpoint(path), species_provider, text_provider)
