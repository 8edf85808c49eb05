import hashlib

import numpy as np
import pytest
import torch

from embeddings import (
    HashSpeciesProvider,
    HashTextProvider,
    NullTextCondition,
    SidecarSpeciesProvider,
    SidecarTextProvider,
    SpeciesProvider,
    TextFeatures,
    TextProvider,
    read_sidecar,
    tokenize,
    write_sidecar,
)
from errors import ContainerError, InvalidInputError, MagicMismatchError, ShapeMismatchError, UnknownSpeciesError


def test_hash_species_provider_is_canonical_and_unit():
    provider = HashSpeciesProvider(seed=1, dim=32)
    a = provider.species_embed('Tiger')
    b = provider.species_embed('  tiger ')
    assert np.array_equal(a.vector, b.vector)
    assert a.dim == 32
    assert np.linalg.norm(a.vector) == pytest.approx(1.0)
    assert not np.array_equal(a.vector, provider.species_embed('wolf').vector)
    assert isinstance(provider, SpeciesProvider)


def test_species_seed_changes_vectors():
    assert not np.array_equal(HashSpeciesProvider(0).species_embed('horse').vector,
                              HashSpeciesProvider(1).species_embed('horse').vector)


def test_empty_names_and_captions_are_rejected():
    with pytest.raises(InvalidInputError):
        HashSpeciesProvider().species_embed('  ')
    with pytest.raises(InvalidInputError):
        HashTextProvider().text_features('')


def test_tokenize_strips_punctuation_and_caps_words():
    assert tokenize('The tiger, runs!') == ['the', 'tiger', 'runs']
    assert len(tokenize(' '.join(['walk'] * 50))) == 32


def test_text_features_shapes():
    provider = HashTextProvider(dim=16)
    features = provider.text_features('a wolf trots forward')
    assert features.words.shape == (4, 16)
    assert features.sentence.shape == (16,)
    assert np.linalg.norm(features.sentence) == pytest.approx(1.0)
    tokens = features.tokens(torch.float64)
    assert tokens.shape == (5, 16)
    assert torch.equal(tokens[0], torch.as_tensor(features.sentence))
    assert isinstance(provider, TextProvider)


def test_text_features_validate_widths():
    with pytest.raises(ShapeMismatchError):
        TextFeatures(np.zeros(4), np.zeros((2, 5)))


def test_null_condition_keeps_gradients():
    null = NullTextCondition(8)
    null.null_text_features().tokens(torch.float32).sum().backward()
    assert null.sentence.grad is not None
    assert null.words.grad is not None


def test_sidecar_providers(tmp_path):
    path = tmp_path / 'species.umeb'
    write_sidecar(path, {'Tiger': np.array([3.0, 4.0]), 'wolf': np.array([1.0, 0.0])})
    provider = SidecarSpeciesProvider.from_file(path)
    assert provider.dim == 2
    assert np.allclose(provider.species_embed('tiger').vector, [0.6, 0.8])
    with pytest.raises(UnknownSpeciesError):
        provider.species_embed('lion')

    text_path = tmp_path / 'text.umeb'
    write_sidecar(text_path, {'the wolf runs': np.arange(12.0).reshape(4, 3)})
    text = SidecarTextProvider.from_file(text_path)
    features = text.text_features('the wolf runs')
    assert np.array_equal(features.sentence, [0.0, 1.0, 2.0])
    assert features.num_words == 3
    with pytest.raises(InvalidInputError):
        text.text_features('the wolf sleeps')


def test_sidecar_bad_magic(tmp_path):
    path = tmp_path / 'bad.umeb'
    path.write_bytes(b'NOPE' + bytes(8))
    with pytest.raises(MagicMismatchError):
        read_sidecar(path)


def test_sidecar_with_undecodable_key(tmp_path):
    path = tmp_path / 'species.umeb'
    write_sidecar(path, {'wolf': np.array([1.0, 0.0])})
    data = path.read_bytes()
    at = data.index(b'wolf')
    path.write_bytes(data[:at] + b'\xff' + data[at + 1:])
    with pytest.raises(ContainerError, match='UTF-8'):
        read_sidecar(path)


def test_single_word_sentence_is_that_word():
    features = HashTextProvider(dim=16).text_features('gallop')
    assert features.num_words == 1
    assert np.allclose(features.sentence, features.words[0])


def test_sentence_ignores_word_order():
    provider = HashTextProvider(dim=16)
    a = provider.text_features('the wolf runs forward')
    b = provider.text_features('forward runs wolf the')
    assert np.allclose(a.sentence, b.sentence)
    assert not np.allclose(a.words, b.words)


def _reference_species_vector(seed, name, dim):
    digest = hashlib.sha256(f'species:{seed}:{name}'.encode('utf-8')).digest()
    vector = np.random.default_rng(int.from_bytes(digest[:8], 'little')).standard_normal(dim)
    return vector / np.linalg.norm(vector)


def test_wolf_horse_similarity_is_frozen():
    expected = float(_reference_species_vector(0, 'wolf', 64) @ _reference_species_vector(0, 'horse', 64))
    for provider in (HashSpeciesProvider(), HashSpeciesProvider(seed=0, dim=64)):
        wolf = provider.species_embed('Wolf').vector
        horse = provider.species_embed('horse').vector
        assert float(wolf @ horse) == pytest.approx(expected, abs=1e-12)
    assert abs(expected) < 1.0
