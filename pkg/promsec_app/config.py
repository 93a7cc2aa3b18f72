"""
Command configuration.

Values are layered: Django settings (and through them the environment) give
the defaults, an optional JSON document passed with ``--config`` overrides
them section by section, and the global command flags override both. The LLM
credential never passes through here; only the name of the environment
variable that holds it does.
"""
import json
import logging
import os
from dataclasses import dataclass, replace

from django.conf import settings

from .llm_client import LlmConfig, make_client
from .neural_kernel import TrainConfig
from .optimizer_loop import LoopConfig
from .security_analyzer import Analyzer, AnalyzerConfig
from .utils import PipelineError, ensure_dir, read_text

logger = logging.getLogger(__name__)

SECTIONS = ('analyzer', 'llm', 'train', 'loop', 'paths')
PATH_KEYS = ('corpus_dir', 'checkpoint_dir', 'runs_dir', 'templates_path')
_CREDENTIAL_KEYS = ('api_key', 'apikey', 'credential', 'token', 'secret', 'password')


class ConfigError(PipelineError):
    pass


@dataclass(frozen=True)
class Paths:
    corpus_dir: str
    checkpoint_dir: str
    runs_dir: str
    templates_path: str

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'corpus_dir': settings.PROMSEC_CORPUS_DIR,
            'checkpoint_dir': settings.PROMSEC_CHECKPOINT_DIR,
            'runs_dir': settings.PROMSEC_RUNS_DIR,
            'templates_path': settings.PROMSEC_TEMPLATES_PATH,
        }
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
        return cls(**values)

    def prepare(self):
        """Create the output directories; the template bank must already exist"""
        for path in (self.corpus_dir, self.checkpoint_dir, self.runs_dir):
            ensure_dir(path)
        if not os.path.isfile(self.templates_path):
            raise ConfigError(f"fix template bank {self.templates_path} does not exist")
        return self

    def to_dict(self):
        return {key: getattr(self, key) for key in PATH_KEYS}


@dataclass(frozen=True)
class AppConfig:
    analyzer: AnalyzerConfig
    llm: LlmConfig
    train: TrainConfig
    loop: LoopConfig
    paths: Paths
    seed: int = 7

    @classmethod
    def load(cls, path=None, seed=None, mode=None, graph_kind=None, max_iters=None, epsilon=None):
        """
        Build the layered configuration.

        Args:
            path: optional JSON document with any of the sections
                analyzer, llm, train, loop, paths and a top-level seed
            seed, mode, graph_kind, max_iters, epsilon: global flags

        Raises:
            ConfigError: unreadable document, unknown keys or invalid values
        """
        document = cls.read_document(path) if path else {}
        sections = {name: document.get(name) or {} for name in SECTIONS}
        seed = seed if seed is not None else document.get('seed', settings.PROMSEC_TRAIN_SEED)
        loop_flags = {'mode': mode, 'graph_kind': graph_kind, 'max_iterations': max_iters, 'epsilon': epsilon}
        try:
            config = cls(
                analyzer=AnalyzerConfig.from_settings(**sections['analyzer']),
                llm=LlmConfig.from_settings(**sections['llm']),
                train=TrainConfig.from_settings(**dict(sections['train'], seed=seed)),
                loop=LoopConfig.from_settings(**dict(sections['loop'], **{
                    k: v for k, v in loop_flags.items() if v is not None})),
                paths=Paths.from_settings(**sections['paths']),
                seed=int(seed),
            )
        except TypeError as e:
            raise ConfigError(f"unknown configuration key: {e}")
        except PipelineError as e:
            raise ConfigError(str(e))
        logger.debug("Loaded configuration%s", f" from {path}" if path else '')
        return config

    @staticmethod
    def read_document(path):
        try:
            document = json.loads(read_text(path))
        except ValueError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(document) - set(SECTIONS) - {'seed'})
        if unknown:
            raise ConfigError(f"config file {path} has unknown sections {unknown}")
        llm = document.get('llm') or {}
        leaked = sorted(k for k in llm if k.lower() in _CREDENTIAL_KEYS)
        if leaked:
            raise ConfigError(f"config file {path} must not hold credentials ({', '.join(leaked)}); "
                              "set llm.credential_env to the name of an environment variable instead")
        return document

    def with_loop(self, **changes):
        return replace(self, loop=replace(self.loop, **changes))

    def with_analyzer(self, **changes):
        return replace(self, analyzer=replace(self.analyzer, **changes))

    def make_analyzer(self):
        return Analyzer(self.analyzer)

    def make_client(self, client=None):
        """LLM client of the configured kind, or of ``client`` when given"""
        llm = self.llm if client is None else replace(self.llm, client=client)
        return make_client(llm)

    def to_dict(self):
        """Snapshot recorded with runs; holds the credential variable name only"""
        return {
            'analyzer': self.analyzer.to_dict(),
            'llm': self.llm.to_dict(),
            'train': self.train.to_dict(),
            'loop': self.loop.to_dict(),
            'paths': self.paths.to_dict(),
            'seed': self.seed,
        }
