from functools import partial
import copy
import hashlib
import os
import json

import toml
from box import Box

from drrel.exceptions import ConfigError


class Missing:
    """
    Sentinel value object/singleton used to differentiate between ambiguous
    situations where `None` is a valid value.
    """

    def __bool__(self) -> bool:
        return False

    def __eq__(self, other) -> bool:
        return isinstance(other, self.__class__)

    def __repr__(self) -> str:
        return "<Missing>"


missing = Missing()


# Documented schema of an experiment configuration. config/settings.toml
# mirrors these values.
DEFAULTS = {
    'seed': 20220814,
    'jobs': 1,
    'log': {
        'handlers': ['stdout'],
        'stdout': {'handler_type': 'stdout', 'level': 'info'},
    },
    'catalog': {
        'n_queries': 1000,
        'docs_per_query': 10,
        'zipf_exponent': 1.0,
        'monthly_volume': 60000,
        'relevance_prior': {'kind': 'beta', 'a': 1.0, 'b': 1.0, 'value': 0.5},
    },
    'click_model': {
        'num_positions': 10,
        'theta': [],
        'theta_power': 1.5,
        'last_position_uptick': 0.0,
        'eps_plus': 0.95,
        'eps_minus_top': 0.1,
        'anchor_factor': 0.5,
    },
    'simulation': {
        'n_sessions': 60000,
        'horizon_hours': 672,
        'logging_policy': 'noisy_relevance',
        'policy_noise': 0.25,
        'n_randomized_sessions': 20000,
        'n_randomization': 20000,
        'randomization_theta_top': 1.0,
        'shards': 4,
    },
    'misspecification': {
        'alpha': 1.0,
        'beta': 1.0,
        'theta': 1.0,
        'eps_plus': 1.0,
        'eps_minus': 1.0,
    },
    'imputation': {
        'encoder_dim': 16,
        'encoder_signal': 6,
        'encoder_noise': 0.8,
        'hidden': [64, 32, 16],
        'activation': 'tanh',
        'learning_rate': 0.05,
        'warmup_steps': 200,
        'batch_size': 128,
        'epochs': 20,
    },
    'tracking': {
        'min_impressions': 20,
    },
    'examination': {
        'n_trees': 50,
        'max_depth': 3,
        'shrinkage': 0.1,
        'min_leaf': 20,
        'l2': 1.0,
        'positive_threshold_s': 5.0,
        'negative_threshold_s': 1.0,
        'holdout_fraction': 0.2,
        'retrain_every_hours': 0,
    },
    'affine': {
        'hidden': [64, 32],
        'activation': 'tanh',
        'learning_rate': 0.05,
        'warmup_steps': 200,
        'batch_size': 128,
        'epochs': 20,
    },
    'tradeoff': {
        'hidden': [64, 32, 16],
        'activation': 'tanh',
        'learning_rate': 0.01,
        'warmup_steps': 100,
        'batch_size': 128,
        'epochs': 10,
        'clamp_floor': 1e-6,
        'zeta_l2': 5.0,
    },
    'metrics': {
        'k': 4,
        'grade_thresholds': [0.2, 0.4, 0.6, 0.8],
        'bucket_thresholds': [10, 1000],
        'tie_epsilon': 1e-6,
        'baseline': 'naive_ctr',
    },
    'theory': {
        'n_configs': 24,
        'max_interactions': 12,
        'replications': 2000,
        'variance_sizes': [1, 2, 5, 10],
        'variance_grid': 40,
        'imputation_error': 0.3,
        'mc_chunks': 4,
    },
}

# keys that change how a run is observed, not what it computes
_UNHASHED_KEYS = ('log', 'jobs')


def deep_merge(base, update):
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expr):
    """Split ``a.b.c=value`` into a nested dict, parsing value as a TOML literal."""
    if '=' not in expr:
        raise ConfigError('override {!r} must look like key.path=value'.format(expr))
    path, raw = expr.split('=', 1)
    keys = [k for k in path.strip().split('.') if k]
    if not keys:
        raise ConfigError('override {!r} has an empty key path'.format(expr))
    try:
        value = toml.loads('v = {}'.format(raw.strip()))['v']
    except toml.TomlDecodeError:
        value = raw.strip()
    nested = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


def config_hash(data):
    hashed = dict((k, v) for k, v in data.items() if k not in _UNHASHED_KEYS)
    canonical = json.dumps(hashed, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


class Settings(object):
    _ext_list = ('.toml', '.json')
    __slots__ = ['_store', '_defaults', 'root_path', 'config_file', '_overrides', '_config_files']

    def __init__(self, root_path=None, config_file=None, overrides=None, defaults=None):
        self._store = Box({}, box_it_up=True, frozen_box=True)
        self._defaults = DEFAULTS if defaults is None else defaults
        self._overrides = list(overrides or [])
        self._config_files = ()
        self.config_file = config_file
        self.root_path = root_path or os.getcwd()
        self.execute_loaders()

    def __call__(self, *args, **kwargs):
        return self.get(*args, **kwargs)

    def __getattr__(self, name):
        value = self.get(name)
        if value is None:
            raise KeyError("{0} does not exists".format(name))
        return value

    def __delattr__(self, name):
        raise Exception('Deleting attr not allowed.')

    def __contains__(self, item):
        return item in self.store

    def __getitem__(self, item):
        value = self.get(item)
        if value is None:
            raise KeyError("{0} does not exists".format(item))
        return value

    @property
    def store(self):
        return self._store

    @property
    def config_files(self):
        return self._config_files

    @property
    def config_hash(self):
        return config_hash(self.as_dict())

    def keys(self):
        return self.store.keys()

    def values(self):
        return self.store.values()

    def as_dict(self):
        return self.store.to_dict()

    to_dict = as_dict

    def get(self, key, default=None):
        return self.store.get(key, default)

    def exists(self, key):
        return self.get(key, default=missing) is not missing

    def section(self, name):
        """A plain dict copy of one top-level section."""
        value = self.get(name, default=missing)
        if value is missing:
            raise ConfigError('configuration has no [{}] section'.format(name))
        return value.to_dict() if hasattr(value, 'to_dict') else value

    def with_overrides(self, *overrides):
        return Settings(root_path=self.root_path, config_file=self.config_file,
                        overrides=self._overrides + list(overrides), defaults=self._defaults)

    def reload(self):  # pragma: no cover
        self.execute_loaders()

    def _file_loader(self, fpath):
        ext = os.path.splitext(fpath)[1]
        if ext == '.toml':
            return partial(self.load_toml, fpath)
        elif ext == '.json':
            return partial(self.load_json, fpath)
        raise ConfigError(f'No available loader for {ext} file')

    def _search(self, root, prefixes):
        found = []
        for prefix in prefixes:
            for ext in self._ext_list:
                fpath = os.path.join(root, "{}{}".format(prefix, ext))
                if os.path.isfile(fpath):
                    found.append(fpath)
        return found

    def execute_loaders(self):
        if self.config_file is not None:
            if not os.path.isfile(self.config_file):
                raise ConfigError('config file {} does not exist'.format(self.config_file))
            config_files = [self.config_file]
        else:
            root = self.root_path
            config_dir = os.path.join(root, "config")
            config_files = []
            if os.path.isdir(config_dir):
                config_files = self._search(config_dir, ["settings", "settings.local"])
            if len(config_files) == 0:
                config_files = self._search(root, ["settings", "settings.local"])

        config_data = copy.deepcopy(self._defaults)
        for fpath in config_files:
            try:
                config_data = deep_merge(config_data, self._file_loader(fpath)())
            except (toml.TomlDecodeError, json.JSONDecodeError) as ex:
                raise ConfigError('cannot parse {}: {}'.format(fpath, ex))
        for expr in self._overrides:
            config_data = deep_merge(config_data, parse_override(expr))

        self._store = Box(config_data, box_it_up=True, frozen_box=True)
        self._config_files = tuple(config_files)

    def load_toml(self, path):
        return toml.load(path)

    def load_json(self, path):
        with open(path, 'rb') as f:
            return json.loads(f.read())
