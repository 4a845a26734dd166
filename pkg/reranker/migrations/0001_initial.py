from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='PublishedVersion',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('version', models.PositiveIntegerField(unique=True)),
                ('variant', models.CharField(max_length=40)),
                ('config_hash', models.CharField(blank=True, default='', max_length=64)),
                ('manifest', models.TextField()),
                ('device_part', models.TextField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['version'],
            },
        ),
        migrations.CreateModel(
            name='EmbeddingRow',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('table', models.CharField(max_length=20)),
                ('index', models.PositiveIntegerField()),
                ('values', models.TextField()),
                ('version', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='rows', to='reranker.publishedversion')),
            ],
            options={
                'ordering': ['version', 'table', 'index'],
                'unique_together': {('version', 'table', 'index')},
            },
        ),
    ]
