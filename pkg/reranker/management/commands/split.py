import os

from django.conf import settings

from reranker.bundle import ModelBundle
from reranker.cloud_service import EmbeddingStore

from ._shared import EdgeRecCommand


class Command(EdgeRecCommand):
    help = 'Split a bundle into its device part and embedding part, optionally publishing to the store'

    def add_command_arguments(self, parser):
        parser.add_argument('--model', required=True, help='Bundle file')
        parser.add_argument('--out', default='', help='Output directory for the two parts')
        parser.add_argument('--publish', action='store_true',
                            help='Publish the embedding tables to the database-backed store')

    def run(self, config, options):
        bundle = ModelBundle.load(options['model'])
        out_dir = options['out'] or os.path.join(settings.EDGEREC_RUNS_DIR, f'split-v{bundle.version}')
        os.makedirs(out_dir, exist_ok=True)
        device_path = os.path.join(out_dir, 'device.json')
        embedding_path = os.path.join(out_dir, 'embeddings.json')
        bundle.save_device_part(device_path)
        bundle.save_embedding_part(embedding_path)
        device = bundle.device_model()
        self.stdout.write(
            f"v{bundle.version} {bundle.variant} (config {bundle.manifest.config_hash}): "
            f"device part {device.payload_bytes()} bytes -> {device_path}; "
            f"embeddings -> {embedding_path}"
        )
        if options['publish']:
            store = EmbeddingStore.from_database(config.retained_versions)
            store.publish_version(bundle)
            self.stdout.write(f"Published v{bundle.version}; retained versions {store.versions()}")
