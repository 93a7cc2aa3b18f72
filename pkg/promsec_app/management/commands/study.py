import logging
import os
from dataclasses import replace

import numpy as np

from promsec_app import ggan
from promsec_app.code_graphs import AST, CFG, DFG, default_vocab, graph_from_source
from promsec_app.corpus import load_corpus
from promsec_app.evaluation import bar_chart, run_mini_study, study_chart, write_csv
from promsec_app.fix_templates import TemplateBank
from promsec_app.optimizer_loop import PROMSEC, run_mode
from promsec_app.utils import new_run_id

from ._base import PromsecCommand

logger = logging.getLogger(__name__)

INTER_INTRA = 'inter-intra'
GRAPH_KINDS_STUDY = 'graph-kinds'
STUDY_COLUMNS = ('codebase', 'inter', 'intra', 'inter_normalized', 'intra_normalized', 'exact', 'versions')
KIND_COLUMNS = ('graph_kind', 'inter_normalized', 'intra_normalized', 'programs', 'secured_fraction',
                'mean_final_k', 'mean_similarity', 'final_loss_g')


def mean_normalized(results):
    pairs = [r.normalized() for r in results]
    return float(np.mean([p[0] for p in pairs])), float(np.mean([p[1] for p in pairs]))


class Command(PromsecCommand):
    help = 'Run the inter/intra-version edit distance study or compare graph kinds'

    def add_command_arguments(self, parser):
        parser.add_argument('study', type=str, choices=(INTER_INTRA, GRAPH_KINDS_STUDY), help='Study to run')
        parser.add_argument('--mini-study', type=str, help='Study document (default: bundled mini-study)')
        parser.add_argument('--corpus', type=str, help='Training and test corpus for graph-kinds')
        parser.add_argument('--limit', type=int, default=10, help='Test programs per graph kind')
        parser.add_argument('--epochs', type=int, help='Training epochs per graph kind')
        parser.add_argument('--out', type=str, help='Output directory (default: <runs dir>/<study id>)')

    def run(self, **options):
        out_dir = options.get('out') or os.path.join(self.config.paths.runs_dir, new_run_id('study'))
        if options['study'] == INTER_INTRA:
            self.inter_intra(out_dir, options)
        else:
            self.graph_kinds(out_dir, options)
        self.audit('study_finished', f"{options['study']} study in {out_dir}", out_dir=out_dir)
        self.success(f'✓ {options["study"]} study written to {out_dir}')

    def inter_intra(self, out_dir, options):
        kind = self.config.loop.graph_kind
        results = run_mini_study(kind, options.get('mini_study'))
        write_csv(os.path.join(out_dir, 'study.csv'), STUDY_COLUMNS, [r.to_dict() for r in results])
        study_chart(results, os.path.join(out_dir, 'charts', 'inter_intra.svg'))
        for r in results:
            self.stdout.write(f'  {r.codebase:<16} inter {r.inter:6.2f}  intra {r.intra:6.2f}'
                              f'{"" if r.exact else "  (approximate)"}')
        inter, intra = mean_normalized(results)
        self.stdout.write(f'  mean normalized ({kind}): inter {inter:.3f}, intra {intra:.3f}')

    def graph_kinds(self, out_dir, options):
        programs = load_corpus(options.get('corpus') or self.config.paths.corpus_dir)
        test = programs[:options['limit']]
        train_cfg = self.config.train
        if options.get('epochs') is not None:
            train_cfg = replace(train_cfg, epochs=options['epochs'])
        analyzer = self.config.make_analyzer()
        bank = TemplateBank.load(self.config.paths.templates_path)
        vocab = default_vocab()
        rows = []
        for kind in (AST, CFG, DFG):
            inter, intra = mean_normalized(run_mini_study(kind, options.get('mini_study'), vocab))
            graphs = [graph_from_source(p.unit.text, kind, vocab, unit_id=p.unit.id) for p in programs]
            model = ggan.GganModel.from_config(train_cfg, graph_kind=kind, vocab=vocab, bank=bank)
            model, history = ggan.train(model, graphs, train_cfg, analyzer=analyzer)
            ggan.save(model, os.path.join(out_dir, f"ggan-{kind.lower()}.ckpt"), train_config=train_cfg)
            cfg = replace(self.config.loop, mode=PROMSEC, graph_kind=kind)
            ledgers = [run_mode(p.unit, cfg, self.config.make_client(), analyzer, model,
                                run_id=f"{kind.lower()}-{p.id}") for p in test]
            finals = [ledger.best_trace() for ledger in ledgers if ledger.best_trace() is not None]
            similarities = [t.similarity for t in finals if t.similarity is not None]
            rows.append({
                'graph_kind': kind,
                'inter_normalized': inter,
                'intra_normalized': intra,
                'programs': len(ledgers),
                'secured_fraction': sum(ledger.secured for ledger in ledgers) / len(ledgers) if ledgers else 0.0,
                'mean_final_k': float(np.mean([t.k for t in finals])) if finals else None,
                'mean_similarity': float(np.mean(similarities)) if similarities else None,
                'final_loss_g': history[-1].loss_g if history else None,
            })
            logger.info("Graph kind %s: %s", kind, rows[-1])
            self.stdout.write(f"  {kind}: secured {rows[-1]['secured_fraction']:.0%}, "
                              f"inter {inter:.3f} / intra {intra:.3f}")
        write_csv(os.path.join(out_dir, 'graph_kinds.csv'), KIND_COLUMNS, rows)
        bar_chart({'secured fraction': {r['graph_kind']: r['secured_fraction'] for r in rows},
                   'normalized inter': {r['graph_kind']: r['inter_normalized'] for r in rows}},
                  os.path.join(out_dir, 'charts', 'graph_kinds.svg'), 'Graph kind comparison', 'graph kind', 'value')
