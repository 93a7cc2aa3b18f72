from django.apps import AppConfig


class PromsecAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'promsec_app'
    verbose_name = 'PromSec prompt optimization'
