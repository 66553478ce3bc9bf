import logging
import traceback

from .Cohort import load_cohort, load_embeddings
from .Errors import ConfigError
from .ReportWriter import ReportWriter

# Base class for every audit subcommand
# Should be extended by each stage with its own step definitions
# Step example: {'name': 'project', 'run': self.project}


class BaseStage:
    name = None

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        from . import __version__
        self.config = config
        self.on_data_callback = on_data_callback
        self.on_error_callback = on_error_callback
        self.sections = []
        self.section_index = 0
        self.data = {}
        self.error = None
        self._cohort = None
        self._embeddings = {}
        provenance = {'stage': self.name, 'version': __version__, 'seed': config.seed, 'config': config.echo()}
        self.writer = ReportWriter(config.out_dir / self.name, config.format, provenance)
        logging.info(f"Init {self.__class__.__name__}: out_dir => {self.writer.out_dir}")

    def start(self):
        """Run every step in order; returns True when all steps completed and their outputs were written."""
        if not self.sections:
            logging.error("BaseStage cannot be used directly")
            return False
        try:
            for self.section_index, section in enumerate(self.sections):
                logging.info(f"{self.name}: step {section['name']} started")
                section['run']()
                logging.info(f"{self.name}: step {section['name']} complete")
        except Exception as e:
            self.__on_error(e)
            return False
        self.on_stage_complete()
        return True

    def on_stage_complete(self):
        logging.info(f"{self.name}: {len(self.writer.written)} files written")
        self.data['__stage'] = self.name
        self.data['__outputs'] = [str(path) for path in self.writer.written]
        self.__safe_callback(self.on_data_callback, self.data)

    def cohort(self):
        if self._cohort is None:
            path = self.config.require_file(self.config['data']['cohort'], 'cohort file ([data] cohort)')
            self._cohort = load_cohort(path)
        return self._cohort

    def embeddings(self, name):
        if name not in self._embeddings:
            if name not in self.config.embeddings:
                raise ConfigError(f"no [embeddings:{name}] section configured")
            section = self.config.embeddings[name]
            path = self.config.require_file(section['path'], f"embeddings '{name}'")
            ids = self.config.require_file(section['ids'], f"ids file for '{name}'") if section['ids'] else None
            embeddings = load_embeddings(path, section['format'], ids)
            self.cohort().require_ids(embeddings.ids)
            self._embeddings[name] = embeddings
        return self._embeddings[name]

    def split_ids(self, embeddings, split):
        """Embedding ids whose cohort split matches (``all`` keeps every id), in embedding row order."""
        if split == 'all':
            return list(embeddings.ids)
        splits = self.cohort().values('split', embeddings.ids)
        ids = [i for i, s in zip(embeddings.ids, splits) if s == split]
        if not ids:
            raise ConfigError(f"no embedded samples in split '{split}'")
        return ids

    def labels(self, section):
        labels = self.config[section]['labels'] or list(self.cohort().label_names)
        if not labels:
            raise ConfigError(f"[{section}] labels is empty and the cohort has no label_ columns")
        return labels

    def __on_error(self, error=None):
        step = self.sections[self.section_index]['name'] if self.sections else '?'
        logging.error(f"{self.name}: step {step} failed: {error}")
        logging.debug(traceback.format_exc())
        self.error = error
        self.__safe_callback(self.on_error_callback, error)

    def __safe_callback(self, callback, param):
        if callback is not None:
            try:
                callback(self, param)
            except Exception as e:
                logging.error(f"__safe_callback => exception in callback! {e}")
                traceback.print_exc()
