from django.apps import AppConfig


class NmaInfluenceConfig(AppConfig):
    name = 'nmainfluence'
    verbose_name = 'Network meta-analysis influence diagnostics'

    def ready(self):
        # Registers the built-in influence measures.
        import nmainfluence.actions  # noqa: F401
