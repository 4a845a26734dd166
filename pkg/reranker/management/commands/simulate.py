from reranker.bundle import ModelBundle
from reranker.evalsim import metrics_report, run_sessions

from ._shared import EdgeRecCommand


class Command(EdgeRecCommand):
    help = 'Simulate user sessions against the cloud recommender, with or without a device model'

    def add_command_arguments(self, parser):
        parser.add_argument('--model', default='', help='Bundle file to publish and serve')
        parser.add_argument('--users', type=int, default=None, help='Number of simulated users')
        parser.add_argument('--seed', type=int, default=None, help='Overrides SEED')
        parser.add_argument('--out', default='', help='Session log path (JSON lines)')
        parser.add_argument('--report', default='', help='Metrics report path')

    def run(self, config, options):
        if options['seed'] is not None:
            config = config.replace(seed=options['seed'])
        bundle = ModelBundle.load(options['model']) if options['model'] else None
        log = run_sessions(config, users=options['users'], bundle=bundle)

        log_path = self.output_path(options['out'], f'sessions-{config.config_hash()}.jsonl')
        log.save(log_path)
        self.stdout.write(f"Wrote {len(log)} records to {log_path}")

        report = metrics_report(log, config.page_size)
        report_path = self.output_path(options['report'], f'report-{config.config_hash()}.txt')
        self.write_text(report_path, report.to_text())
        self.stdout.write(report.to_text())
