import logging

from promsec_app import ggan
from promsec_app.code_graphs import default_vocab, graph_from_source
from promsec_app.corpus import load_corpus
from promsec_app.evaluation import write_csv
from promsec_app.fix_templates import TemplateBank
from promsec_app.neural_kernel import TrainConfig
from promsec_app.optimizer_loop import mask_cwe
from promsec_app.utils import PipelineError

from ._base import PromsecCommand

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ('epoch', 'loss_g', 'loss_d', 'mean_delta_k')


def history_path(checkpoint):
    return f"{checkpoint}.history.csv"


class Command(PromsecCommand):
    help = 'Train the graph GAN on a corpus and write a checkpoint plus its loss history'

    def add_command_arguments(self, parser):
        parser.add_argument('corpus', nargs='?', type=str, help='Corpus directory (default: PROMSEC_CORPUS_DIR)')
        parser.add_argument('--out', type=str, help='Checkpoint path (default: <checkpoint dir>/ggan-<kind>.ckpt)')
        parser.add_argument('--epochs', type=int, help='Training epochs')
        parser.add_argument('--batch-size', type=int, help='Graphs per batch')
        parser.add_argument('--lr', type=float, help='Learning rate')
        parser.add_argument('--loss-mix', type=float, help='Weight of the adversarial term')
        parser.add_argument('--mask', type=int, nargs='+', metavar='CWE',
                            help='Leave out every unit flagged with these CWE ids')

    def run(self, **options):
        overrides = {
            'epochs': options.get('epochs'),
            'batch_size': options.get('batch_size'),
            'learning_rate': options.get('lr'),
            'loss_mix': options.get('loss_mix'),
        }
        cfg = TrainConfig.from_dict(dict(
            self.config.train.to_dict(), **{k: v for k, v in overrides.items() if v is not None}))
        kind = self.config.loop.graph_kind
        corpus_dir = options.get('corpus') or self.config.paths.corpus_dir
        checkpoint = options.get('out') or self.default_checkpoint(kind)

        units = [program.unit for program in load_corpus(corpus_dir)]
        analyzer = self.config.make_analyzer()
        if options.get('mask'):
            units = mask_cwe(units, options['mask'], analyzer)
        vocab = default_vocab()
        graphs = [graph_from_source(unit.text, kind, vocab, unit_id=unit.id) for unit in units]
        model = ggan.GganModel.from_config(cfg, graph_kind=kind, vocab=vocab,
                                           bank=TemplateBank.load(self.config.paths.templates_path))
        logger.info("Training %r on %d units: %s", model, len(units), ', '.join(u.id for u in units))

        def progress(stats):
            self.stdout.write(f'  epoch {stats.epoch:>3}: L_G={stats.loss_g:.4f} '
                              f'L_D={stats.loss_d:.4f} dk={stats.mean_delta_k:.3f}')

        try:
            model, history = ggan.train(model, graphs, cfg, analyzer=analyzer, progress=progress)
        except PipelineError as e:
            self.audit('training_failed', str(e), severity='error', corpus=corpus_dir, **e.to_dict())
            raise
        ggan.save(model, checkpoint, train_config=cfg)
        write_csv(history_path(checkpoint), HISTORY_COLUMNS, [stats.to_dict() for stats in history])

        self.audit('model_trained', f"{model!r} trained for {len(history)} epoch(s)",
                   checkpoint=checkpoint, graph_kind=kind, masked=options.get('mask') or [],
                   units=[u.id for u in units], train_config=cfg.to_dict(),
                   final_loss_g=history[-1].loss_g if history else None)
        self.success(f'✓ Trained on {len(graphs)} {kind} graphs for {len(history)} epoch(s)')
        self.stdout.write(f'  Checkpoint: {checkpoint}')
        self.stdout.write(f'  History: {history_path(checkpoint)}')
