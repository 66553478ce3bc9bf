#!/usr/bin/env python3
import argparse
import logging
import os
import sys

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

# Set up path for module imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from biasaudit import (AuditConfig, AuditError, EvaluateStage, InspectStage, SummarizeStage, SynthStage,
                       TrainProbeStage, __version__)

STAGES = {
    'inspect': InspectStage,
    'train-probe': TrainProbeStage,
    'evaluate': EvaluateStage,
    'synth': SynthStage,
    'summarize': SummarizeStage,
}


def build_parser():
    parser = argparse.ArgumentParser(prog='biasaudit', description='Representation-bias auditing toolkit')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    subcommands = parser.add_subparsers(dest='command', required=True)
    for command in STAGES:
        sub = subcommands.add_parser(command)
        sub.add_argument('--config', help='INI configuration file')
        sub.add_argument('--out', help='output directory (overrides [general] out_dir)')
        sub.add_argument('--seed', type=int, help='master seed, unsigned 64-bit (overrides [general] seed)')
        sub.add_argument('--format', choices=('json', 'csv', 'both'), help='report format (overrides [general] format)')
        sub.add_argument('--debug', action='store_true', default=None, help='debug logging')
    return parser


class AuditRunner:
    def __init__(self, argv=None):
        self.args = build_parser().parse_args(argv)
        self.config = None
        self.stage = None

    def _load_config(self):
        """Load the INI configuration and apply command-line overrides"""
        args = self.args
        return AuditConfig.load(args.config, seed=args.seed, out_dir=args.out, format=args.format, debug=args.debug)

    def on_stage_complete(self, stage, data):
        outputs = data.get('__outputs', [])
        logging.info(f"{stage.name} finished: {len(outputs)} outputs")

    def on_error(self, stage, error):
        logging.error(f"{stage.name} failed: {error}")

    def start(self):
        """Run the selected subcommand; returns the process exit status"""
        try:
            self.config = self._load_config()
        except AuditError as e:
            logging.error(f"Invalid configuration: {e}")
            return 1
        if self.config['general']['debug']:
            logging.getLogger().setLevel(logging.DEBUG)

        logging.info(f"Starting biasaudit {__version__}: {self.args.command} (seed {self.config.seed})")
        stage_class = STAGES[self.args.command]
        self.stage = stage_class(self.config, on_data_callback=self.on_stage_complete, on_error_callback=self.on_error)
        return 0 if self.stage.start() else 1


def main(argv=None):
    return AuditRunner(argv).start()


if __name__ == "__main__":
    sys.exit(main())
