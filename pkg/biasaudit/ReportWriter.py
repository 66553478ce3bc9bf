import json
import logging
from pathlib import Path

import pandas as pd

from .Utils import to_builtin

CSV_FLOAT_FORMAT = '%.10g'


class ReportWriter:
    """Writes stage outputs under one directory.

    Output is byte-stable: JSON keys are sorted, floats are printed at fixed precision in CSV and
    nothing time-dependent is recorded. JSON documents embed the provenance block; CSV outputs are
    accompanied by ``provenance.json`` in the same directory.
    """

    def __init__(self, out_dir, format='both', provenance=None):
        self.out_dir = Path(out_dir)
        self.format = format
        self.provenance = provenance or {}
        self.written = []

    @property
    def wants_json(self):
        return self.format in ('json', 'both')

    @property
    def wants_csv(self):
        return self.format in ('csv', 'both')

    def path(self, name):
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, name, data, embed_provenance=True):
        document = dict(data, provenance=self.provenance) if embed_provenance else data
        path = self.path(name)
        text = json.dumps(to_builtin(document), sort_keys=True, indent=2, allow_nan=False)
        path.write_text(text + '\n', encoding='utf-8')
        return self.record(path)

    def write_csv(self, name, frame):
        path = self.path(name)
        frame = frame if isinstance(frame, pd.DataFrame) else pd.DataFrame(frame)
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n', encoding='utf-8')
        provenance = path.parent / 'provenance.json'
        if provenance not in self.written:
            self.write_json(provenance.relative_to(self.out_dir).as_posix(), self.provenance, embed_provenance=False)
        return self.record(path)

    def write_report(self, name, data, table):
        """A report as ``<name>.json`` and/or ``<name>.csv``, depending on the configured format."""
        paths = []
        if self.wants_json:
            paths.append(self.write_json(f"{name}.json", data))
        if self.wants_csv:
            paths.append(self.write_csv(f"{name}.csv", table))
        return paths

    def record(self, path):
        if path not in self.written:
            self.written.append(path)
        logging.info(f"Wrote {path}")
        return path
