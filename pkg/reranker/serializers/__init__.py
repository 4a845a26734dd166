from .log_serializers import LOG_KINDS, TRIGGER_KINDS, LogRecordSerializer
from .bundle_serializers import BundleManifestSerializer

__all__ = [
    'LOG_KINDS',
    'TRIGGER_KINDS',
    'LogRecordSerializer',
    'BundleManifestSerializer',
]
