# Generated by Django 5.2.7 on 2026-10-16 09:12

import django.db.models.deletion
import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='AuditLog',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('action', models.CharField(choices=[('run_started', 'Run Started'), ('run_finished', 'Run Finished'), ('run_failed', 'Run Failed'), ('bench_finished', 'Benchmark Finished'), ('model_trained', 'Model Trained'), ('training_failed', 'Training Failed'), ('analysis_failed', 'Analysis Failed'), ('fuzz_result', 'Fuzz Result'), ('survey_finished', 'Survey Finished'), ('corpus_generated', 'Corpus Generated'), ('report_generated', 'Report Generated'), ('study_finished', 'Study Finished')], max_length=50)),
                ('severity', models.CharField(choices=[('info', 'Info'), ('warning', 'Warning'), ('error', 'Error'), ('critical', 'Critical')], default='info', max_length=10)),
                ('description', models.TextField()),
                ('command', models.CharField(blank=True, max_length=50, null=True)),
                ('run_id', models.CharField(blank=True, max_length=100, null=True)),
                ('extra_data', models.JSONField(blank=True, default=dict)),
                ('timestamp', models.DateTimeField(auto_now_add=True, db_index=True)),
            ],
            options={
                'verbose_name': 'Audit Log',
                'verbose_name_plural': 'Audit Logs',
                'db_table': 'audit_logs',
                'ordering': ['-timestamp'],
                'indexes': [models.Index(fields=['-timestamp'], name='audit_timestamp_idx'), models.Index(fields=['action', '-timestamp'], name='audit_action_idx'), models.Index(fields=['run_id', '-timestamp'], name='audit_run_idx')],
            },
        ),
        migrations.CreateModel(
            name='OptimizationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('run_id', models.CharField(max_length=100, unique=True)),
                ('mode', models.CharField(choices=[('promsec', 'PromSec'), ('bl1', 'BL1 (seven templates)'), ('bl2', 'BL2 (iterative templates)'), ('a1-no-ggan', 'Ablation: no gGAN'), ('a2-no-llm', 'Ablation: no LLM')], max_length=20)),
                ('status', models.CharField(choices=[('running', 'Running'), ('secured', 'Secured'), ('budget-exhausted', 'Budget Exhausted'), ('error', 'Error')], default='running', max_length=20)),
                ('input_kind', models.CharField(choices=[('code', 'Code'), ('prompt', 'Prompt')], default='code', max_length=10)),
                ('source_name', models.CharField(blank=True, default='', max_length=255)),
                ('initial_k', models.IntegerField(blank=True, null=True)),
                ('final_k', models.IntegerField(blank=True, help_text='CWE count of the best iteration', null=True)),
                ('best_iteration', models.IntegerField(blank=True, null=True)),
                ('iterations', models.IntegerField(default=0)),
                ('best_similarity', models.FloatField(blank=True, null=True)),
                ('llm_queries', models.IntegerField(default=0)),
                ('analyses', models.IntegerField(default=0)),
                ('seconds', models.FloatField(default=0.0)),
                ('ledger_path', models.CharField(blank=True, default='', max_length=500)),
                ('config_snapshot', models.JSONField(blank=True, default=dict)),
                ('error', models.TextField(blank=True, null=True)),
                ('started_at', models.DateTimeField(default=django.utils.timezone.now)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'db_table': 'optimization_runs',
                'ordering': ['-started_at'],
                'indexes': [models.Index(fields=['mode', 'status'], name='runs_mode_status_idx'), models.Index(fields=['-started_at'], name='runs_started_idx')],
            },
        ),
        migrations.CreateModel(
            name='IterationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('iteration', models.IntegerField()),
                ('k', models.IntegerField(blank=True, null=True)),
                ('best_k', models.IntegerField(blank=True, null=True)),
                ('cwes', models.JSONField(blank=True, default=list)),
                ('similarity', models.FloatField(blank=True, null=True)),
                ('ged', models.FloatField(blank=True, null=True)),
                ('template', models.IntegerField(blank=True, null=True)),
                ('cycle', models.IntegerField(blank=True, null=True)),
                ('unit_hash', models.CharField(blank=True, default='', max_length=64)),
                ('llm_queries', models.IntegerField(default=0)),
                ('analyses', models.IntegerField(default=0)),
                ('input_tokens', models.IntegerField(default=0)),
                ('output_tokens', models.IntegerField(default=0)),
                ('llm_seconds', models.FloatField(default=0.0)),
                ('analysis_seconds', models.FloatField(default=0.0)),
                ('seconds', models.FloatField(default=0.0)),
                ('error', models.TextField(blank=True, null=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='iteration_records', to='promsec_app.optimizationrun')),
            ],
            options={
                'db_table': 'iteration_records',
                'ordering': ['run', 'iteration'],
                'unique_together': {('run', 'iteration')},
            },
        ),
    ]
