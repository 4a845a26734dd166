from reranker.bundle import ModelBundle
from reranker.hubsm import IE
from reranker.session_log import SessionLog
from reranker.trainer import explain_request

from ._shared import EdgeRecCommand


def behavior_summary(record):
    item = record.item
    head = f"item {item.item_id} (category {item.category_id}, brand {item.brand_id})"
    action = record.action
    if record.kind == IE:
        detail = (f"dwell {action.exposure_duration_ms} ms, scroll max {action.scroll_speed_max:.0f} px/s, "
                  f"delete {action.delete_reason}")
    else:
        flags = ','.join(action.active_flags()) or 'none'
        detail = f"viewed {action.ipv_duration_ms} ms, actions {flags}"
    return f"{head}: {detail}"


class Command(EdgeRecCommand):
    help = 'Print per-candidate IE/IPV attention weights for one logged request'

    def add_command_arguments(self, parser):
        parser.add_argument('--model', required=True, help='Bundle file')
        parser.add_argument('--log', required=True, help='Session log holding the request')
        parser.add_argument('--request-id', required=True, help='Trigger request id, e.g. r3-2')
        parser.add_argument('--candidate', type=int, default=None, help='Explain one candidate only')
        parser.add_argument('--top', type=int, default=0, help='Show only the N largest weights per branch')

    def run(self, config, options):
        bundle = ModelBundle.load(options['model'])
        log = SessionLog.load(options['log'])
        traces = explain_request(log, bundle, options['request_id'], options['candidate'])
        self.stdout.write(f"{bundle.variant} v{bundle.version} (config {bundle.manifest.config_hash})")
        for trace in traces:
            c = trace.candidate
            self.stdout.write(
                f"\ncandidate {c.item_id} (category {c.category_id}, brand {c.brand_id}) "
                f"score {trace.score:.5f}")
            for kind, pairs in trace.weights.items():
                if not pairs:
                    self.stdout.write(f"  {kind}: empty")
                    continue
                self.stdout.write(f"  {kind}: {len(pairs)} behaviors, weights sum {sum(w for w, _ in pairs):.6f}")
                ranked = sorted(pairs, key=lambda p: -p[0])
                if options['top']:
                    ranked = ranked[:options['top']]
                for weight, record in ranked:
                    self.stdout.write(f"    {weight:.4f}  {behavior_summary(record)}")
