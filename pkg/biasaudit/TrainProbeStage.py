import logging

from .BaseStage import BaseStage
from .Errors import ConfigError
from .Probes import train_probe


class TrainProbeStage(BaseStage):
    """Trains every configured probe head on the frozen embeddings of one backbone."""
    name = 'train-probe'

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        super().__init__(config, on_data_callback, on_error_callback)
        self.backbone = None
        self.trained = {}
        self.sections = [
            {'name': 'load_data', 'run': self.load_data},
            {'name': 'train', 'run': self.train},
            {'name': 'write', 'run': self.write},
        ]

    def load_data(self):
        self.backbone = self.config['train']['embeddings'] or next(iter(self.config.embeddings), None)
        if self.backbone is None:
            raise ConfigError("train-probe needs an [embeddings:<name>] section")
        self.embeddings(self.backbone)

    def train(self):
        section = self.config['train']
        embeddings = self.embeddings(self.backbone)
        cohort = self.cohort()
        labels = self.labels('train')
        train = embeddings.subset(self.split_ids(embeddings, section['train_split']))
        val = embeddings.subset(self.split_ids(embeddings, section['val_split']))
        logging.info(f"Training probes on {self.backbone}: {train.n} train / {val.n} validation samples, "
                     f"labels={labels}")
        for name in self.config.probes:
            spec = self.config.probe_spec(name)
            logging.info(f"Training probe {name}: {spec.architecture}, {spec.hidden_layers} hidden layers")
            model, log = train_probe(spec, (train, cohort), (val, cohort), labels)
            self.trained[name] = (spec, model, log)
            self.data.setdefault('probes', {})[name] = {'best_epoch': log.best_epoch,
                                                       'val_macro_auc': log.best_val_macro_auc}

    def write(self):
        for name, (spec, model, log) in self.trained.items():
            self.writer.write_json(f"{name}.json", {
                'name': name,
                'backbone': self.backbone,
                'spec': spec.echo(),
                'best_epoch': log.best_epoch,
                'stopped_early': log.stopped_early,
                'probe': model.to_dict(),
            })
            self.writer.write_csv(f"{name}_log.csv", log.to_dataframe())
