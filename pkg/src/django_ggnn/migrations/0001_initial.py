# Generated by Django 5.0.6 on 2024-06-02 14:41

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="GGNNController",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "name",
                    models.CharField(
                        help_text="Unique name of the controller.",
                        max_length=255,
                        unique=True,
                    ),
                ),
                (
                    "created",
                    models.DateTimeField(
                        auto_now_add=True, help_text="When the controller was created."
                    ),
                ),
                (
                    "modified",
                    models.DateTimeField(
                        auto_now=True, help_text="Last modification of the record."
                    ),
                ),
                (
                    "weights",
                    models.JSONField(
                        blank=True,
                        help_text="The network parameters as JSON.",
                        null=True,
                    ),
                ),
                (
                    "certificate",
                    models.JSONField(
                        blank=True,
                        help_text="Stability certificate of the stored weights.",
                        null=True,
                    ),
                ),
                (
                    "report",
                    models.JSONField(
                        blank=True, help_text="Per-epoch training report.", null=True
                    ),
                ),
            ],
        ),
    ]
