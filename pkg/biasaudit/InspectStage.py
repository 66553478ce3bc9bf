import logging

import numpy as np
import pandas as pd

from .BaseStage import BaseStage
from .Cohort import AGE_BIN, EmbeddingSet
from .Errors import ConfigError
from .Projection import ProjectionModel, pca_fit, pca_transform, resolve_mode_count, tsne_embed
from .Sampling import one_scan_per_patient, subsample_per_group
from .Stats import adjust_jointly, marginal_densities, run_feature_bias_test

ALL_SCANS = 'all_scans'
ONE_SCAN = 'one_scan_per_patient'
OVERLAY_ATTRIBUTES = ('sex', 'race', 'age', AGE_BIN)


def truncate(model, k):
    return ProjectionModel(mean=model.mean, components=model.components[:k],
                           explained_variance=model.explained_variance[:k],
                           explained_variance_ratio=model.explained_variance_ratio[:k],
                           n_samples=model.n_samples, total_variance=model.total_variance)


def coordinate_frame(ids, coords, prefix, cohort):
    """Projected coordinates with the overlay attributes (sex, race, age and age bin) of each sample."""
    frame = pd.DataFrame(coords, columns=[f"{prefix}_{j + 1}" for j in range(coords.shape[1])])
    for position, attribute in enumerate(('sample_id',) + OVERLAY_ATTRIBUTES):
        values = list(ids) if attribute == 'sample_id' else cohort.values(attribute, ids)
        frame.insert(position, attribute, values)
    return frame


class InspectStage(BaseStage):
    """Feature-space inspection: PCA and t-SNE projections, subgroup KS tests and marginal densities."""
    name = 'inspect'

    def __init__(self, config, on_data_callback=None, on_error_callback=None):
        super().__init__(config, on_data_callback, on_error_callback)
        self.variants = {}
        self.results = {}
        self.sections = [
            {'name': 'load_data', 'run': self.load_data},
            {'name': 'select_samples', 'run': self.select_samples},
            {'name': 'project', 'run': self.project},
            {'name': 'feature_bias_test', 'run': self.feature_bias_test},
            {'name': 'write', 'run': self.write},
        ]

    def load_data(self):
        if not self.config.embeddings:
            raise ConfigError("inspect needs at least one [embeddings:<name>] section")
        for name in self.config.embeddings:
            self.embeddings(name)

    def select_samples(self):
        section = self.config['inspect']
        cohort = self.cohort()
        reference = self.embeddings(next(iter(self.config.embeddings)))
        ids = self.split_ids(reference, section['split'])
        for name in self.config.embeddings:
            missing = set(ids) - set(self.embeddings(name).index)
            if missing:
                raise ConfigError(f"embeddings '{name}' lack {len(missing)} of the inspected samples")

        if section['robustness']:
            variants = [ALL_SCANS, ONE_SCAN]
        else:
            variants = [ONE_SCAN if section['one_scan_per_patient'] else ALL_SCANS]

        for variant in variants:
            selected = ids
            if variant == ONE_SCAN:
                selected = list(one_scan_per_patient(cohort.subset(ids), self.config.seed_for('inspect.one_scan')))
            if section['per_group']:
                selected = list(subsample_per_group(cohort.subset(selected), section['group_attribute'],
                                                    section['per_group'], self.config.seed_for('inspect.subsample')))
            self.variants[variant] = selected
            logging.info(f"Inspection set {variant}: {len(selected)} samples")
        self.data['variants'] = {variant: len(selected) for variant, selected in self.variants.items()}

    def project(self):
        section = self.config['inspect']
        for variant, ids in self.variants.items():
            for name in self.config.embeddings:
                X = self.embeddings(name).rows(ids)
                full = pca_fit(X, min(X.shape[0] - 1, X.shape[1]))
                retained = resolve_mode_count(full.explained_variance_ratio, section['variance_target'])
                if section['modes'] > full.k:
                    raise ConfigError(f"modes={section['modes']} exceeds the {full.k} available PCA modes")
                model = truncate(full, max(retained, section['modes']))
                coords = pca_transform(model, X)
                result = {'model': model, 'retained': retained, 'pca': EmbeddingSet(ids, coords)}
                if section['tsne']:
                    tsne = self.config['tsne']
                    result['tsne'] = tsne_embed(coords[:, :retained], perplexity=tsne['perplexity'],
                                                iterations=tsne['iterations'],
                                                seed=self.config.seed_for(f"inspect.tsne.{name}"),
                                                learning_rate=tsne['learning_rate'],
                                                early_exaggeration=tsne['early_exaggeration'],
                                                exaggeration_iterations=tsne['exaggeration_iterations'])
                self.results[(variant, name)] = result
                logging.info(f"{variant}/{name}: {retained} modes retain {section['variance_target']:.0%} of variance")

    def feature_bias_test(self):
        section = self.config['inspect']
        pairs = self.config.pairs()
        cohort = self.cohort()
        for (variant, name), result in self.results.items():
            metadata = {'variant': variant, 'split': section['split'], 'per_group': section['per_group'],
                        'n': result['pca'].n, 'seed': self.config.seed}
            model = result['model']
            coords = EmbeddingSet(result['pca'].ids, result['pca'].matrix[:, :section['modes']])
            result['report'] = run_feature_bias_test(coords, cohort, pairs, section['modes'],
                                                     model.explained_variance_ratio, model=name, space='pca',
                                                     metadata=metadata)
            if section['test_tsne'] and 'tsne' in result:
                tsne_coords = EmbeddingSet(result['pca'].ids, result['tsne'].coords)
                result['tsne_report'] = run_feature_bias_test(tsne_coords, cohort, pairs, 2, model=name,
                                                              space='tsne', metadata=metadata)

        if section['family'] == 'pooled':
            for variant in self.variants:
                for space in ('report', 'tsne_report'):
                    keys = [key for key in self.results if key[0] == variant and space in self.results[key]]
                    pooled = adjust_jointly([self.results[key][space] for key in keys])
                    for key, report in zip(keys, pooled):
                        self.results[key][space] = report

        self.data['significant'] = {
            f"{variant}/{name}": sum(row.tier != 'ns' for row in result['report'].rows)
            for (variant, name), result in self.results.items()
        }

    def write(self):
        section = self.config['inspect']
        selectors = list(dict.fromkeys(selector for pair in self.config.pairs() for selector in pair))
        for (variant, name), result in self.results.items():
            prefix = f"{variant}/{name}"
            model = result['model']
            self.writer.write_json(f"{prefix}_pca.json", {'model': name, 'retained_modes': result['retained'],
                                                         'projection': model.to_dict()})
            pca_frame = coordinate_frame(result['pca'].ids, result['pca'].matrix, 'mode', self.cohort())
            self.writer.write_csv(f"{prefix}_pca_coords.csv", pca_frame)
            densities = [marginal_densities(result['pca'], self.cohort(), selectors, section['modes'],
                                            section['bins'], space='pca', model=name)]
            if 'tsne' in result:
                tsne = result['tsne']
                tsne_frame = coordinate_frame(result['pca'].ids, tsne.coords, 'tsne', self.cohort())
                self.writer.write_csv(f"{prefix}_tsne_coords.csv", tsne_frame)
                self.writer.write_json(f"{prefix}_tsne.json", {
                    'model': name, 'kl_initial': tsne.kl_initial, 'kl_final': tsne.kl_final,
                    'config': tsne.config_echo(), 'kl_history': [list(point) for point in tsne.kl_history]})
                densities.append(marginal_densities(EmbeddingSet(result['pca'].ids, tsne.coords), self.cohort(),
                                                    selectors, 2, section['bins'], space='tsne', model=name))
            self.writer.write_csv(f"{prefix}_marginals.csv", pd.concat(densities, ignore_index=True))

            report = result['report']
            self.writer.write_report(f"{prefix}_ks", report.to_dict(), report.to_table())
            if 'tsne_report' in result:
                report = result['tsne_report']
                self.writer.write_report(f"{prefix}_ks_tsne", report.to_dict(), report.to_table())
        self.data['cumulative_variance'] = {
            f"{variant}/{name}": float(np.sum(result['model'].explained_variance_ratio[:section['modes']]))
            for (variant, name), result in self.results.items()
        }
