import logging

from .BaseStage import BaseStage
from .Cohort import GroupSelector
from .Metrics import save_scores
from .Synth import generate, oracle_scores, write_synthetic


class SynthStage(BaseStage):
    name = 'synth'

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        super().__init__(config, on_data_callback, on_error_callback)
        self.spec = None
        self.embeddings_set = None
        self.synthetic_cohort = None
        self.sections = [
            {'name': 'generate', 'run': self.generate},
            {'name': 'write', 'run': self.write},
        ]

    def generate(self):
        self.spec = self.config.synth_spec()
        self.embeddings_set, self.synthetic_cohort = generate(self.spec)
        self.data['samples'] = self.embeddings_set.n

    def write(self):
        section = self.config['synth']
        paths = write_synthetic(self.embeddings_set, self.synthetic_cohort, self.writer.out_dir, section['format'])
        for path in paths.values():
            self.writer.record(path)
        if section['oracle_scores']:
            group = GroupSelector.parse(section['degrade_group']) if section['degrade_group'] else None
            scores = oracle_scores(self.embeddings_set, self.synthetic_cohort, self.spec, group,
                                   section['degrade_factor'])
            self.writer.record(save_scores(scores, self.writer.path('oracle_scores.csv')))
            if group is not None:
                logging.info(f"Oracle scores degraded for {group} by factor {section['degrade_factor']}")
        self.writer.write_json('synth_spec.json', {'spec': self.spec.echo()})
