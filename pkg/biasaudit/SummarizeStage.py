from .BaseStage import BaseStage
from .Cohort import summarize_cohort


class SummarizeStage(BaseStage):
    name = 'summarize'

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        super().__init__(config, on_data_callback, on_error_callback)
        self.summary = None
        self.sections = [
            {'name': 'load_cohort', 'run': self.cohort},
            {'name': 'summarize', 'run': self.summarize},
            {'name': 'write', 'run': self.write},
        ]

    def summarize(self):
        section = self.config['summarize']
        self.summary = summarize_cohort(self.cohort(), group_by=tuple(section['group_by']),
                                        row_attributes=tuple(section['row_attributes']),
                                        labels=section['labels'] or None)
        self.data['rows'] = len(self.summary)

    def write(self):
        self.writer.write_report('cohort_summary', {'table': self.summary.to_dict('records')}, self.summary)
