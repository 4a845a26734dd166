from django.apps import AppConfig


class RerankerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'reranker'
    verbose_name = 'EdgeRec reranker'
