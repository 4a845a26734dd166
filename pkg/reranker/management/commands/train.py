from reranker.crban import FULL_VARIANT, variant_spec
from reranker.session_log import SessionLog
from reranker.trainer import train

from ._shared import EdgeRecCommand


class Command(EdgeRecCommand):
    help = 'Train one model variant on a session log and write its bundle'

    def add_command_arguments(self, parser):
        parser.add_argument('--variant', default=FULL_VARIANT, help='Model variant name')
        parser.add_argument('--log', required=True, help='Training session log')
        parser.add_argument('--validation-log', default='', help='Held-out log for early stopping')
        parser.add_argument('--out', default='', help='Bundle path')
        parser.add_argument('--model-version', type=int, default=1, help='Model version id')
        parser.add_argument('--seed', type=int, default=None, help='Overrides SEED')

    def run(self, config, options):
        variant_spec(options['variant'])
        if options['seed'] is not None:
            config = config.replace(seed=options['seed'])
        log = SessionLog.load(options['log'])
        if log.skipped:
            self.stderr.write(f"Skipped {log.skipped} malformed lines in {options['log']}")
        validation = SessionLog.load(options['validation_log']) if options['validation_log'] else None

        run = train(config, log, options['variant'], options['model_version'], validation_log=validation)

        out = self.output_path(options['out'], f"bundle-v{options['model_version']}-{config.config_hash()}.json")
        run.bundle.save(out)
        curve_path = out.rsplit('.', 1)[0] + '.curve.csv'
        run.curve.write_csv(curve_path)

        for e in run.curve.epochs:
            self.stdout.write(
                f"epoch {e.epoch}: train loss {e.train_loss:.5f} "
                f"train GAUC {_fmt(e.train_gauc)} validation GAUC {_fmt(e.validation_gauc)}"
            )
        self.stdout.write(
            f"{options['variant']} v{options['model_version']} (config {config.config_hash()}): "
            f"best epoch {run.best_epoch}; wrote {out} and {curve_path}"
        )


def _fmt(value):
    return 'n/a' if value is None else f'{value:.5f}'
