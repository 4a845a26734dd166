from reranker.bundle import ModelBundle
from reranker.evalsim import BASELINE_ARM, metrics_report, run_sessions, variant_table, write_position_csv
from reranker.exceptions import UndefinedMetricError
from reranker.session_log import SessionLog
from reranker.trainer import replay_gauc, replay_scores

from ._shared import EdgeRecCommand


class Command(EdgeRecCommand):
    help = 'Report metrics for a session log, replay bundles on it, or A/B a bundle against the baseline'

    def add_command_arguments(self, parser):
        parser.add_argument('--log', default='', help='Session log to evaluate')
        parser.add_argument('--model', action='append', default=[], help='Bundle file (repeatable)')
        parser.add_argument('--users', type=int, default=None, help='Users per simulated arm')
        parser.add_argument('--seed', type=int, default=None, help='Overrides SEED')
        parser.add_argument('--report', default='', help='Text report path')
        parser.add_argument('--positions', default='', help='Per-position CTR CSV path')

    def run(self, config, options):
        if options['seed'] is not None:
            config = config.replace(seed=options['seed'])
        if options['log']:
            text = self.evaluate_log(config, options)
        elif options['model']:
            text = self.ab_test(config, options)
        else:
            raise UndefinedMetricError("Nothing to evaluate: pass --log and/or --model")
        self.stdout.write(text)
        if options['report']:
            self.write_text(self.output_path(options['report'], 'eval.txt'), text)

    def evaluate_log(self, config, options):
        log = SessionLog.load(options['log'])
        report = metrics_report(log, config.page_size)
        sections = [report.to_text()]
        if log.skipped:
            sections.append(f"skipped malformed lines: {log.skipped}\n")
        bundles = [ModelBundle.load(path) for path in options['model']]
        if bundles:
            rows = []
            for bundle in bundles:
                try:
                    rows.append((bundle.variant, replay_gauc(log, bundle)))
                except UndefinedMetricError:
                    rows.append((bundle.variant, None))
            sections.append(variant_table(rows))
            header = log.header or {}
            for bundle in bundles:
                if header.get('model_version') == bundle.version and header.get('arm') == bundle.variant:
                    sections.append(
                        f"max |logged - replayed| score for v{bundle.version}: "
                        f"{replay_deviation(log, bundle):.3g}\n")
        if options['positions']:
            write_position_csv({report.arm: report}, self.output_path(options['positions'], 'positions.csv'))
        return '\n'.join(sections)

    def ab_test(self, config, options):
        reports = {}
        baseline = run_sessions(config, users=options['users'])
        reports[BASELINE_ARM] = metrics_report(baseline, config.page_size)
        for path in options['model']:
            bundle = ModelBundle.load(path)
            log = run_sessions(config, users=options['users'], bundle=bundle)
            reports[bundle.variant] = metrics_report(log, config.page_size)
        if options['positions']:
            write_position_csv(reports, self.output_path(options['positions'], 'positions.csv'))
        lines = [r.to_text() for r in reports.values()]
        base = reports[BASELINE_ARM]
        for arm, report in reports.items():
            if arm == BASELINE_ARM:
                continue
            lines.append(
                f"{arm} vs {BASELINE_ARM}: CTR {report.ctr - base.ctr:+.5f}, "
                f"CTR@40-50 {report.mean_ctr(40, 50) - base.mean_ctr(40, 50):+.5f}, "
                f"CTR@1-5 {report.mean_ctr(1, 5) - base.mean_ctr(1, 5):+.5f}\n"
            )
        return '\n'.join(lines)


def replay_deviation(log, bundle):
    """Largest absolute gap between logged rerank scores and replayed ones."""
    replayed = replay_scores(log, bundle)
    worst = 0.0
    for record in log.of_kind('rerank'):
        scores = replayed.get(record.payload['request_id'])
        if scores is None or record.payload['disabled']:
            continue
        for entry in record.payload['order']:
            worst = max(worst, abs(entry['score'] - scores[entry['item_id']]))
    return worst
