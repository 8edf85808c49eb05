import logging
import os

import numpy as np
from flask import Flask, current_app, jsonify, request

from checkpoint import ModelBundle
from config import config, run_config_from_dict
from errors import ConfigError, CrossMotionError, InvalidInputError
from generator import generate_motion
from metrics import mme
from motion_features import decode_to_global
from skeleton import canonical_topology, extract_bone_lengths

logger = logging.getLogger(__name__)


def _load_bundle(app):
    path = app.config['CHECKPOINT_PATH']
    if path and os.path.exists(path):
        bundle = ModelBundle.load(path)
        logger.info('loaded checkpoint %s (blocks: %s)', path, sorted(bundle.present))
        return bundle
    # No checkpoint: an untrained bundle keeps /health and /species answering.
    logger.warning('no checkpoint at %r; generation is disabled until one is trained', path)
    return ModelBundle(run_config_from_dict({}, app.config['RUN_OVERRIDES']))


def _int_field(body, name, default, low, high):
    value = body.get(name, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidInputError(f'{name} must be an integer')
    if not low <= value <= high:
        raise InvalidInputError(f'{name} must be in [{low}, {high}], got {value}')
    return value


def _parse_generate(body, bundle, max_length):
    if not isinstance(body, dict):
        raise InvalidInputError('request body must be a JSON object')
    caption = body.get('caption')
    species = body.get('species')
    if not isinstance(caption, str) or not caption.strip():
        raise InvalidInputError('caption must be a non-empty string')
    if not isinstance(species, str) or not species.strip():
        raise InvalidInputError('species must be a non-empty string')
    gen = bundle.config.gen
    omega = body.get('omega', gen.omega)
    if isinstance(omega, bool) or not isinstance(omega, (int, float)) or not np.isfinite(omega):
        raise InvalidInputError('omega must be a finite number')
    return {
        'caption': caption,
        'species_name': species,
        'length': _int_field(body, 'length', 120, 4, max_length),
        'seed': _int_field(body, 'seed', 0, 0, 2 ** 31 - 1),
        'R': _int_field(body, 'rounds', gen.rounds, 1, 64),
        'N': _int_field(body, 'ode_steps', gen.ode_steps, 1, 256),
        'omega': float(omega),
    }


def create_app(config_name=None, bundle=None):
    config_name = config_name or os.environ.get('CROSSMOTION_ENV', 'development')
    app = Flask(__name__)
    app.config.from_object(config[config_name])
    app.extensions['crossmotion'] = bundle if bundle is not None else _load_bundle(app)

    def models():
        return current_app.extensions['crossmotion']

    @app.errorhandler(InvalidInputError)
    def invalid_input(exc):
        return jsonify({'error': 'invalid_input', 'message': str(exc)}), 400

    @app.errorhandler(ConfigError)
    def not_ready(exc):
        return jsonify({'error': 'config', 'message': str(exc)}), 503

    @app.errorhandler(CrossMotionError)
    def failed(exc):
        logger.exception('request failed')
        return jsonify({'error': type(exc).__name__, 'message': str(exc)}), 500

    @app.route('/health')
    def health():
        bundle = models()
        return jsonify({'status': 'ok', 'blocks': sorted(bundle.present), 'step': bundle.step})

    @app.route('/species')
    def species():
        return jsonify({'species': models().meta.get('species', [])})

    @app.route('/generate', methods=['POST'])
    def generate():
        bundle = models()
        bundle.require('cgae', 'ae', 'generator')
        params = _parse_generate(request.get_json(silent=True), bundle, app.config['MAX_GENERATE_LENGTH'])
        motion, tpose = generate_motion(bundle, return_tpose=True, **params)
        b = extract_bone_lengths(tpose, canonical_topology())
        world = decode_to_global(motion).joints_world
        logger.info('generated %d frames for %r (%s)', motion.length, params['caption'], params['species_name'])
        return jsonify({
            'caption': params['caption'],
            'species': params['species_name'],
            'seed': params['seed'],
            'frames': motion.length,
            'features': np.asarray(motion.frames).tolist(),
            'joints_world': np.asarray(world).tolist(),
            'bone_lengths': b.lengths.tolist(),
            'mme': mme(motion, b),
        })

    return app


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    create_app().run(debug=True, host='0.0.0.0', port=5000)
