import configparser
import logging
from pathlib import Path

import voluptuous as vol

from .Cohort import GroupSelector
from .Errors import ConfigError
from .Probes import PRESETS, ProbeSpec
from .Sampling import ResamplePlan
from .Synth import SynthSpec
from .Utils import check_seed, derive_seed

FORMATS = ('json', 'csv', 'both')

# Defaults for every single-instance section, as the strings an INI file would hold
DEFAULTS = {
    'general': {
        'seed': '0',
        'out_dir': 'out',
        'format': 'both',
        'debug': 'false',
    },
    'data': {
        'cohort': '',
    },
    'inspect': {
        'split': 'test',
        'pairs': 'race=White/race=Asian, race=White/race=Black, race=Asian/race=Black, sex=Male/sex=Female',
        'modes': '4',
        'variance_target': '0.99',
        'group_attribute': 'race',
        'per_group': '1000',
        'one_scan_per_patient': 'false',
        'robustness': 'false',
        'tsne': 'true',
        'test_tsne': 'false',
        'family': 'model',
        'bins': 'auto',
    },
    'tsne': {
        'perplexity': '30',
        'iterations': '1000',
        'learning_rate': '200',
        'early_exaggeration': '12',
        'exaggeration_iterations': '250',
    },
    'resample': {
        'enabled': 'true',
        'attributes': 'race',
        'age_bin_width': '10',
        'target': '',
        'skip_empty': 'true',
    },
    'train': {
        'embeddings': '',
        'labels': '',
        'train_split': 'train',
        'val_split': 'validation',
    },
    'evaluate': {
        'split': 'test',
        'labels': '',
        'groups': 'race=White, race=Asian, race=Black, sex=Female, sex=Male',
        'target_fpr': '0.2',
        'calibrate_on': 'resampled',
        'probes': 'all',
        'models_dir': '',
    },
    'bootstrap': {
        'replicates': '2000',
        'cluster_by_patient': 'false',
    },
    'synth': {
        'n_per_group': '1000',
        'dim': '16',
        'races': 'White, Asian, Black',
        'labels': 'no_finding',
        'disease_magnitude': '3.0',
        'sex_shift': '0.0',
        'race_shifts': '',
        'prevalence': '0.3',
        'noise_sd': '1.0',
        'female_fraction': '0.5',
        'missing_rate': '0.0',
        'max_scans_per_patient': '1',
        'split_fractions': '0.6, 0.1, 0.3',
        'format': 'binary',
        'oracle_scores': 'false',
        'degrade_group': '',
        'degrade_factor': '1.0',
    },
    'summarize': {
        'group_by': 'race, sex',
        'row_attributes': 'sex',
        'labels': '',
    },
}

PROBE_DEFAULTS = {
    'architecture': 'linear',
    'hidden_layers': '0',
    'hidden_width': '256',
    'learning_rate': '1e-4',
    'batch_size': '256',
    'max_epochs': '100',
    'patience': '10',
}


def _items(value):
    if isinstance(value, (list, tuple)):
        return list(value)
    return [item.strip() for item in str(value).split(',') if item.strip()]


def _optional(validator):
    def check(value):
        if value is None or str(value).strip() == '':
            return None
        return validator(value)
    return check


def _selector(value):
    try:
        GroupSelector.parse(value)
    except ValueError as e:
        raise vol.Invalid(str(e))
    return value


def _pairs(value):
    pairs = []
    for item in _items(value):
        if item.count('/') != 1:
            raise vol.Invalid(f"group pair '{item}' must look like attribute=value/attribute=value")
        pairs.append([_selector(part.strip()) for part in item.split('/')])
    if not pairs:
        raise vol.Invalid("at least one group pair is required")
    return pairs


def _mapping(value):
    mapping = {}
    for item in _items(value):
        if ':' not in item:
            raise vol.Invalid(f"'{item}' must look like key:value")
        key, number = (part.strip() for part in item.split(':', 1))
        mapping[key] = float(number)
    return mapping


def _prevalence(value):
    text = str(value)
    return _mapping(text) if ':' in text else float(text)


def _bins(value):
    return 'auto' if str(value).strip() == 'auto' else vol.All(vol.Coerce(int), vol.Range(min=1))(value)


_bool = vol.Boolean()
_int = vol.Coerce(int)
_float = vol.Coerce(float)
_positive_int = vol.All(_int, vol.Range(min=1))
_positive_float = vol.All(_float, vol.Range(min=0, min_included=False))
_list = vol.All(_items, [str])

SCHEMAS = {
    'general': vol.Schema({
        'seed': vol.All(_int, check_seed),
        'out_dir': vol.All(str, vol.Length(min=1)),
        'format': vol.In(FORMATS),
        'debug': _bool,
    }),
    'data': vol.Schema({'cohort': str}),
    'inspect': vol.Schema({
        'split': vol.In(('train', 'validation', 'test', 'all')),
        'pairs': _pairs,
        'modes': _positive_int,
        'variance_target': vol.All(_float, vol.Range(min=0, max=1, min_included=False)),
        'group_attribute': str,
        'per_group': vol.All(_int, vol.Range(min=0)),
        'one_scan_per_patient': _bool,
        'robustness': _bool,
        'tsne': _bool,
        'test_tsne': _bool,
        'family': vol.In(('model', 'pooled')),
        'bins': _bins,
    }),
    'tsne': vol.Schema({
        'perplexity': vol.All(_float, vol.Range(min=1, min_included=False)),
        'iterations': _positive_int,
        'learning_rate': _positive_float,
        'early_exaggeration': vol.All(_float, vol.Range(min=1)),
        'exaggeration_iterations': vol.All(_int, vol.Range(min=0)),
    }),
    'resample': vol.Schema({
        'enabled': _bool,
        'attributes': _list,
        'age_bin_width': _optional(_positive_float),
        'target': _optional(_positive_int),
        'skip_empty': _bool,
    }),
    'train': vol.Schema({
        'embeddings': str,
        'labels': _list,
        'train_split': vol.In(('train', 'validation', 'test')),
        'val_split': vol.In(('train', 'validation', 'test')),
    }),
    'evaluate': vol.Schema({
        'split': vol.In(('train', 'validation', 'test', 'all')),
        'labels': _list,
        'groups': vol.All(_items, [_selector], vol.Length(min=1)),
        'target_fpr': vol.All(_float, vol.Range(min=0, max=1)),
        'calibrate_on': vol.In(('resampled', 'raw')),
        'probes': _list,
        'models_dir': str,
    }),
    'bootstrap': vol.Schema({
        'replicates': vol.All(_int, vol.Range(min=2)),
        'cluster_by_patient': _bool,
    }),
    'synth': vol.Schema({
        'n_per_group': _positive_int,
        'dim': vol.All(_int, vol.Range(min=2)),
        'races': vol.All(_list, vol.Length(min=1)),
        'labels': vol.All(_list, vol.Length(min=1)),
        'disease_magnitude': _float,
        'sex_shift': _float,
        'race_shifts': _mapping,
        'prevalence': _prevalence,
        'noise_sd': _positive_float,
        'female_fraction': _float,
        'missing_rate': _float,
        'max_scans_per_patient': _positive_int,
        'split_fractions': vol.All(_items, [_float], vol.Length(min=3, max=3)),
        'format': vol.In(('binary', 'csv')),
        'oracle_scores': _bool,
        'degrade_group': _optional(_selector),
        'degrade_factor': vol.All(_float, vol.Range(min=0, max=1)),
    }),
    'summarize': vol.Schema({
        'group_by': _list,
        'row_attributes': _list,
        'labels': _list,
    }),
}

EMBEDDINGS_SCHEMA = vol.Schema({
    vol.Required('path'): vol.All(str, vol.Length(min=1)),
    vol.Optional('format', default='binary'): vol.In(('binary', 'csv')),
    vol.Optional('ids', default=''): str,
})

SCORES_SCHEMA = vol.Schema({
    vol.Required('path'): vol.All(str, vol.Length(min=1)),
})

PROBE_SCHEMA = vol.Schema({
    'architecture': vol.In(('linear', 'mlp')),
    'hidden_layers': vol.All(_int, vol.Range(min=0)),
    'hidden_width': _positive_int,
    'learning_rate': _positive_float,
    'batch_size': _positive_int,
    'max_epochs': _positive_int,
    'patience': _positive_int,
})

INSTANCE_KINDS = {'embeddings': EMBEDDINGS_SCHEMA, 'scores': SCORES_SCHEMA, 'probe': PROBE_SCHEMA}


class AuditConfig:
    """Validated audit configuration: defaults materialised, every section checked, echoable as JSON."""

    def __init__(self, sections, embeddings, probes, scores, base_dir='.', source=None):
        self.sections = sections
        self.embeddings = embeddings
        self.probes = probes
        self.scores = scores
        self.base_dir = Path(base_dir)
        self.source = source

    @classmethod
    def load(cls, path=None, seed=None, out_dir=None, format=None, debug=None):
        parser = configparser.ConfigParser(inline_comment_prefixes=('#',))
        base_dir = Path('.')
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            parser.read(path, encoding='utf-8')
            base_dir = path.resolve().parent
            logging.info(f"Loaded config {path}")
        return cls.from_parser(parser, base_dir=base_dir, source=str(path) if path else None,
                               overrides={'seed': seed, 'out_dir': out_dir, 'format': format, 'debug': debug})

    @classmethod
    def from_parser(cls, parser, base_dir='.', source=None, overrides=None):
        raw = {name: dict(values) for name, values in DEFAULTS.items()}
        embeddings, probes, scores = {}, {}, {}
        instances = {'embeddings': embeddings, 'probe': probes, 'scores': scores}

        for section in parser.sections():
            kind, _, name = section.partition(':')
            if kind in INSTANCE_KINDS:
                if not name:
                    raise ConfigError(f"section [{section}] needs a name, e.g. [{kind}:main]")
                values = dict(parser[section])
                if kind == 'probe':
                    values = dict(PROBE_DEFAULTS, **values)
                instances[kind][name] = cls._validate(section, INSTANCE_KINDS[kind], values)
            elif section in raw:
                raw[section].update(parser[section])
            else:
                raise ConfigError(f"unknown config section [{section}]")

        for key, value in (overrides or {}).items():
            if value is not None:
                raw['general'][key] = str(value).lower() if isinstance(value, bool) else str(value)

        sections = {name: cls._validate(name, SCHEMAS[name], values) for name, values in raw.items()}
        if not probes:
            probes = {name: {key: getattr(spec, key) for key in PROBE_DEFAULTS} for name, spec in PRESETS.items()}
        return cls(sections, embeddings, probes, scores, base_dir=base_dir, source=source)

    @staticmethod
    def _validate(section, schema, values):
        try:
            return schema(values)
        except vol.MultipleInvalid as e:
            error = e.errors[0]
            key = error.path[0] if error.path else '?'
            if error.msg == 'extra keys not allowed':
                raise ConfigError(f"[{section}] unknown option '{key}'") from None
            raise ConfigError(f"[{section}] {key}: {error.msg}") from None

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def seed(self):
        return self.sections['general']['seed']

    @property
    def out_dir(self):
        return self.resolve(self.sections['general']['out_dir'])

    @property
    def format(self):
        return self.sections['general']['format']

    def seed_for(self, stage):
        return derive_seed(self.seed, stage)

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def require_file(self, path, what):
        if not path:
            raise ConfigError(f"no {what} configured")
        resolved = self.resolve(path)
        if not resolved.exists():
            raise ConfigError(f"{what} not found: {resolved}")
        return resolved

    def selectors(self, texts):
        return [GroupSelector.parse(text) for text in texts]

    def pairs(self):
        return [tuple(GroupSelector.parse(text) for text in pair) for pair in self.sections['inspect']['pairs']]

    def probe_spec(self, name):
        return ProbeSpec(seed=self.seed_for(f"train.{name}"), **self.probes[name])

    def resample_plan(self, label=None):
        section = self.sections['resample']
        if not section['enabled']:
            return None
        return ResamplePlan(attributes=tuple(section['attributes']), age_bin_width=section['age_bin_width'],
                            label=label, target=section['target'], seed=self.seed_for('evaluate.resample'),
                            skip_empty=section['skip_empty'])

    def synth_spec(self):
        section = self.sections['synth']
        return SynthSpec(
            n_per_group=section['n_per_group'], dim=section['dim'], races=tuple(section['races']),
            labels=tuple(section['labels']), disease_magnitude=section['disease_magnitude'],
            sex_shift=section['sex_shift'], race_shifts=section['race_shifts'], prevalence=section['prevalence'],
            noise_sd=section['noise_sd'], female_fraction=section['female_fraction'],
            missing_rate=section['missing_rate'], max_scans_per_patient=section['max_scans_per_patient'],
            split_fractions=tuple(section['split_fractions']), seed=self.seed_for('synth'),
        )

    def echo(self):
        return {
            'source': self.source,
            **self.sections,
            'embeddings': self.embeddings,
            'probes': self.probes,
            'scores': self.scores,
        }
