import json
import logging

from .BaseStage import BaseStage
from .Errors import ConfigError
from .Metrics import build_performance_report, load_scores, save_scores
from .Probes import ProbeModel, predict_probe


class EvaluateStage(BaseStage):
    """Subgroup performance of trained probes and external score tables on the evaluation split."""
    name = 'evaluate'

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        super().__init__(config, on_data_callback, on_error_callback)
        self.models = {}
        self.report = None
        self.sections = [
            {'name': 'load_scores', 'run': self.load_scores},
            {'name': 'predict_probes', 'run': self.predict_probes},
            {'name': 'build_report', 'run': self.build_report},
            {'name': 'write', 'run': self.write},
        ]

    def probe_names(self):
        selected = self.config['evaluate']['probes']
        if selected == ['none']:
            return []
        if selected == ['all']:
            return list(self.config.probes)
        unknown = [name for name in selected if name not in self.config.probes]
        if unknown:
            raise ConfigError(f"[evaluate] probes names unconfigured probes: {', '.join(unknown)}")
        return selected

    def load_scores(self):
        for name, section in self.config.scores.items():
            self.models[name] = load_scores(self.config.require_file(section['path'], f"scores '{name}'"))
            self.cohort().require_ids(self.models[name].ids)

    def predict_probes(self):
        names = self.probe_names()
        if not names:
            return
        models_dir = self.config['evaluate']['models_dir']
        models_dir = self.config.resolve(models_dir) if models_dir else self.config.out_dir / 'train-probe'
        for name in names:
            path = models_dir / f"{name}.json"
            if not path.exists():
                raise ConfigError(f"probe model '{name}' not found at {path} (run train-probe first)")
            document = json.loads(path.read_text(encoding='utf-8'))
            embeddings = self.embeddings(document['backbone'])
            model = ProbeModel.from_dict(document['probe'])
            evaluated = embeddings.subset(self.split_ids(embeddings, self.config['evaluate']['split']))
            self.models[name] = predict_probe(model, evaluated)

    def build_report(self):
        if not self.models:
            raise ConfigError("nothing to evaluate: no [scores:<name>] sections and no probes selected")
        section = self.config['evaluate']
        bootstrap = self.config['bootstrap']
        cohort = self.cohort()
        split = section['split']
        covered = set.intersection(*(set(table.ids) for table in self.models.values()))
        splits = cohort.values('split')
        ids = [i for i, s in zip(cohort.ids, splits) if i in covered and (split == 'all' or s == split)]
        if not ids:
            raise ConfigError(f"no samples in split '{split}' are scored by every model")
        if len(ids) < sum(split == 'all' or s == split for s in splits):
            logging.info(f"Evaluating {len(ids)} samples of split '{split}' scored by every model")

        models = {name: table.subset(ids) for name, table in self.models.items()}
        self.report = build_performance_report(
            models, cohort.subset(ids), self.labels('evaluate'), self.config.selectors(section['groups']),
            target_fpr=section['target_fpr'], plan=self.config.resample_plan(),
            replicates=bootstrap['replicates'], seed=self.config.seed_for('evaluate.bootstrap'),
            cluster_by_patient=bootstrap['cluster_by_patient'], calibrate_on=section['calibrate_on'])
        self.data['thresholds'] = self.report.thresholds

    def write(self):
        report = self.report
        self.writer.write_report('performance', report.to_dict(), report.tables())
        self.writer.write_csv('metrics.csv', report.to_frame())
        self.writer.write_csv('plot.csv', report.plot_rows())
        for name in self.probe_names():
            self.writer.record(save_scores(self.models[name], self.writer.path(f"scores/{name}.csv")))
