"""Hallucination detectors that read full LLM activation tensors as images."""

__version__ = "0.1.0"

from .activation import (PAD_VALUE, ActivationTensor, LlmDescriptor, LlmRegistry, PaddingWarning, PoolConfig,
                         PooledTensor, PoolMode, pool, pool_array, validate)
from .baselines import (AggregatorKind, Heatmap, LayerTokenProbe, ProbeConfig, TokenOffsetSet, aggregate_score,
                        fit_probe, heatmap, probe_star)
from .estimators import ActivationPooler, ActMlpClassifier, ActVitClassifier
from .exceptions import (ActVitError, ArchiveError, ConfigError, InvalidActivationError, NumericFailure,
                         ProtocolViolation, UnregisteredLLMError)
from .metrics import auc
from .model import ActMlp, ActMlpConfig, ActVit, ActVitConfig, build_model, freeze, load, patchify, save, unfreeze
from .protocols import ExperimentPlan, run_plan
from .report import latency_bench, learning_curve, results_table
from .store import (Corpus, CorpusSpec, DatasetManifest, PooledDataset, assemble_corpus, read_shards,
                    stratified_split, write_shards)
from .synth import PlantedTask, ToyTransformer, forward_collect, generate_dataset, permute_clone
from .training import OptimSpec, adapt_la, grid_search, train, warmup_cosine_lr, zero_shot_eval
