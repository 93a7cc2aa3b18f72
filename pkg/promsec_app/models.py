from django.db import models
from django.utils import timezone


class OptimizationRun(models.Model):
    """Index row for one run directory under PROMSEC_RUNS_DIR"""

    MODE_CHOICES = [
        ('promsec', 'PromSec'),
        ('bl1', 'BL1 (seven templates)'),
        ('bl2', 'BL2 (iterative templates)'),
        ('a1-no-ggan', 'Ablation: no gGAN'),
        ('a2-no-llm', 'Ablation: no LLM'),
    ]

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('secured', 'Secured'),
        ('budget-exhausted', 'Budget Exhausted'),
        ('error', 'Error'),
    ]

    INPUT_CHOICES = [
        ('code', 'Code'),
        ('prompt', 'Prompt'),
    ]

    run_id = models.CharField(max_length=100, unique=True)
    mode = models.CharField(max_length=20, choices=MODE_CHOICES)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    input_kind = models.CharField(max_length=10, choices=INPUT_CHOICES, default='code')
    source_name = models.CharField(max_length=255, blank=True, default='')

    initial_k = models.IntegerField(null=True, blank=True)
    final_k = models.IntegerField(null=True, blank=True, help_text="CWE count of the best iteration")
    best_iteration = models.IntegerField(null=True, blank=True)
    iterations = models.IntegerField(default=0)
    best_similarity = models.FloatField(null=True, blank=True)

    llm_queries = models.IntegerField(default=0)
    analyses = models.IntegerField(default=0)
    seconds = models.FloatField(default=0.0)

    ledger_path = models.CharField(max_length=500, blank=True, default='')
    config_snapshot = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True, null=True)

    started_at = models.DateTimeField(default=timezone.now)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = 'optimization_runs'
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['mode', 'status'], name='runs_mode_status_idx'),
            models.Index(fields=['-started_at'], name='runs_started_idx'),
        ]

    def __str__(self):
        return f"{self.run_id} ({self.mode}, {self.get_status_display()})"

    @property
    def secured(self):
        return self.status == 'secured'

    @classmethod
    def record(cls, ledger, ledger_path='', source_name=''):
        """
        Create or refresh the row and iteration records for a finished ledger.

        The ledger file stays the canonical record; calling this twice for
        the same run replaces the iteration rows.
        """
        best = ledger.best_trace()
        first_k = next((t.k for t in ledger.traces if t.k is not None), None)
        run, _ = cls.objects.update_or_create(
            run_id=ledger.run_id,
            defaults={
                'mode': ledger.mode,
                'status': ledger.status or 'running',
                'input_kind': ledger.input_kind,
                'source_name': source_name,
                'initial_k': first_k,
                'final_k': best.k if best else None,
                'best_iteration': best.iteration if best else None,
                'iterations': len(ledger.traces),
                'best_similarity': best.similarity if best else None,
                'llm_queries': ledger.setup.llm_queries + sum(t.llm_queries for t in ledger.traces),
                'analyses': ledger.setup.analyses + sum(t.analyses for t in ledger.traces),
                'seconds': ledger.setup.seconds + sum(t.seconds for t in ledger.traces),
                'ledger_path': str(ledger_path),
                'config_snapshot': ledger.config,
                'error': ledger.error,
                'finished_at': timezone.now() if ledger.status else None,
            },
        )
        run.iteration_records.all().delete()
        IterationRecord.objects.bulk_create([IterationRecord.from_trace(run, t) for t in ledger.traces])
        return run


class IterationRecord(models.Model):
    """One analyzed code version of a run, with its cost columns"""

    run = models.ForeignKey(OptimizationRun, on_delete=models.CASCADE, related_name='iteration_records')
    iteration = models.IntegerField()
    k = models.IntegerField(null=True, blank=True)
    best_k = models.IntegerField(null=True, blank=True)
    cwes = models.JSONField(default=list, blank=True)
    similarity = models.FloatField(null=True, blank=True)
    ged = models.FloatField(null=True, blank=True)
    template = models.IntegerField(null=True, blank=True)
    cycle = models.IntegerField(null=True, blank=True)
    unit_hash = models.CharField(max_length=64, blank=True, default='')

    llm_queries = models.IntegerField(default=0)
    analyses = models.IntegerField(default=0)
    input_tokens = models.IntegerField(default=0)
    output_tokens = models.IntegerField(default=0)
    llm_seconds = models.FloatField(default=0.0)
    analysis_seconds = models.FloatField(default=0.0)
    seconds = models.FloatField(default=0.0)
    error = models.TextField(blank=True, null=True)

    class Meta:
        db_table = 'iteration_records'
        ordering = ['run', 'iteration']
        unique_together = ['run', 'iteration']

    def __str__(self):
        return f"{self.run.run_id} #{self.iteration}: k={self.k}"

    @classmethod
    def from_trace(cls, run, trace):
        return cls(
            run=run, iteration=trace.iteration, k=trace.k, best_k=trace.best_k, cwes=trace.cwes,
            similarity=trace.similarity, ged=trace.ged, template=trace.template, cycle=trace.cycle,
            unit_hash=trace.unit_hash, llm_queries=trace.llm_queries, analyses=trace.analyses,
            input_tokens=trace.input_tokens, output_tokens=trace.output_tokens,
            llm_seconds=trace.llm_seconds, analysis_seconds=trace.analysis_seconds,
            seconds=trace.seconds, error=trace.error,
        )


class AuditLog(models.Model):
    """
    Durable pipeline events: runs, training, analyzer failures, fuzz verdicts
    """

    ACTION_CHOICES = [
        # Runs
        ('run_started', 'Run Started'),
        ('run_finished', 'Run Finished'),
        ('run_failed', 'Run Failed'),
        ('bench_finished', 'Benchmark Finished'),

        # Models
        ('model_trained', 'Model Trained'),
        ('training_failed', 'Training Failed'),

        # Analysis and testing
        ('analysis_failed', 'Analysis Failed'),
        ('fuzz_result', 'Fuzz Result'),
        ('survey_finished', 'Survey Finished'),

        # Artifacts
        ('corpus_generated', 'Corpus Generated'),
        ('report_generated', 'Report Generated'),
        ('study_finished', 'Study Finished'),
    ]

    SEVERITY_CHOICES = [
        ('info', 'Info'),
        ('warning', 'Warning'),
        ('error', 'Error'),
        ('critical', 'Critical'),
    ]

    action = models.CharField(max_length=50, choices=ACTION_CHOICES)
    severity = models.CharField(max_length=10, choices=SEVERITY_CHOICES, default='info')
    description = models.TextField()
    command = models.CharField(max_length=50, blank=True, null=True)

    # Related run (optional)
    run_id = models.CharField(max_length=100, blank=True, null=True)

    # Additional data in JSON format
    extra_data = models.JSONField(default=dict, blank=True)

    timestamp = models.DateTimeField(auto_now_add=True, db_index=True)

    class Meta:
        db_table = 'audit_logs'
        verbose_name = 'Audit Log'
        verbose_name_plural = 'Audit Logs'
        ordering = ['-timestamp']
        indexes = [
            models.Index(fields=['-timestamp'], name='audit_timestamp_idx'),
            models.Index(fields=['action', '-timestamp'], name='audit_action_idx'),
            models.Index(fields=['run_id', '-timestamp'], name='audit_run_idx'),
        ]

    def __str__(self):
        return f"{self.timestamp.strftime('%Y-%m-%d %H:%M:%S')} - {self.get_action_display()} - {self.description}"

    @classmethod
    def log(cls, action, description='', severity='info', command=None, run_id=None, **extra_data):
        """
        Create an audit log entry

        Usage:
            AuditLog.log('fuzz_result', description='mean diff 0.0', severity='info', passed=True)
        """
        return cls.objects.create(
            action=action,
            severity=severity,
            description=description,
            command=command,
            run_id=run_id,
            extra_data=extra_data,
        )

    @classmethod
    def get_run_activity(cls, run_id):
        """All events recorded for one run"""
        return cls.objects.filter(run_id=run_id)

    @classmethod
    def get_failures(cls, days=7):
        """Recent warning-or-worse events"""
        from datetime import timedelta

        start_date = timezone.now() - timedelta(days=days)
        return cls.objects.filter(
            severity__in=['warning', 'error', 'critical'],
            timestamp__gte=start_date,
        )
