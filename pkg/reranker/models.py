from django.db import models
import json


class PublishedVersion(models.Model):
    """One published model version: manifest, device part and its embedding rows."""
    version = models.PositiveIntegerField(unique=True)
    variant = models.CharField(max_length=40)
    config_hash = models.CharField(max_length=64, blank=True, default='')
    manifest = models.TextField()
    # Parts 1 and 2 as a bundle document, served to devices on download
    device_part = models.TextField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['version']

    def set_manifest(self, data):
        self.manifest = json.dumps(data)

    def get_manifest(self):
        return json.loads(self.manifest)

    def set_device_part(self, document):
        self.device_part = json.dumps(document)

    def get_device_part(self):
        return json.loads(self.device_part)

    def __str__(self):
        return f"v{self.version} ({self.variant})"


class EmbeddingRow(models.Model):
    version = models.ForeignKey(PublishedVersion, on_delete=models.CASCADE, related_name='rows')
    table = models.CharField(max_length=20)
    index = models.PositiveIntegerField()
    # Space-separated 17-significant-digit decimals
    values = models.TextField()

    class Meta:
        unique_together = ('version', 'table', 'index')
        ordering = ['version', 'table', 'index']

    def __str__(self):
        return f"{self.version_id}:{self.table}[{self.index}]"
