"""Static probing and output-confidence baselines.

Probes are L2-regularized logistic regressions on the activation vector at
one (layer, token offset) cell. ``probe_star`` sweeps every cell and
regularization strength and keeps the best on validation data.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .activation import ActivationTensor
from .metrics import auc
from .synth import resolve_offset

DEFAULT_OFFSETS = (0, 1, 2, -3, -2, -1)
DEFAULT_C_GRID = (10000.0, 100.0, 1.0, 0.01, 0.0001)


@dataclass(frozen=True)
class TokenOffsetSet:
    """Token positions probed; negative offsets count from the sequence end."""

    offsets: tuple[int, ...] = DEFAULT_OFFSETS

    def resolve(self, n_tokens: int) -> list[int]:
        """Absolute indices for a sequence of ``n_tokens``, duplicates dropped in order."""
        seen, out = set(), []
        for o in self.offsets:
            idx = resolve_offset(o, n_tokens)
            if idx not in seen:
                seen.add(idx)
                out.append(idx)
        return out

    def __iter__(self):
        return iter(self.offsets)

    def __len__(self):
        return len(self.offsets)


@dataclass(frozen=True)
class ProbeConfig:
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    max_iter: int = 1000
    tol: float = 1e-6
    standardize: bool = True

    def __post_init__(self):
        if not self.c_grid or any(c <= 0 for c in self.c_grid):
            raise ValueError("every C must be positive")


def _labels(tensors: Sequence[ActivationTensor]) -> np.ndarray:
    y = [t.label for t in tensors]
    if any(v is None for v in y):
        raise ValueError("every activation tensor needs a label")
    return np.asarray(y, dtype=np.int64)


def cell_features(tensors: Sequence[ActivationTensor], layer: int, offset: int) -> np.ndarray:
    """Stack the feature vectors at ``(layer, offset)`` of every tensor."""
    return np.stack([t.data[layer, resolve_offset(offset, t.n_tokens)] for t in tensors]).astype(np.float64)


class LayerTokenProbe(ClassifierMixin, BaseEstimator):
    """Logistic probe on the hidden state at one (layer, token offset).

    ``fit`` takes a sequence of :class:`ActivationTensor`; labels default to
    the tensors' own labels.
    """

    def __init__(self, layer=0, token_offset=-1, C=1.0, max_iter=1000, tol=1e-6, standardize=True):
        self.layer = layer
        self.token_offset = token_offset
        self.C = C
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize

    def _features(self, X):
        return cell_features(X, self.layer, self.token_offset)

    def fit(self, X, y=None):
        y = _labels(X) if y is None else np.asarray(y, dtype=np.int64)
        if np.unique(y).size < 2:
            raise ValueError("probe training data contains a single class")
        feats = self._features(X)
        self.scaler_ = StandardScaler(with_mean=self.standardize, with_std=self.standardize).fit(feats)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter, tol=self.tol, solver="lbfgs").fit(
                self.scaler_.transform(feats), y
            )
        self.classes_ = self.clf_.classes_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "clf_")
        return self.clf_.decision_function(self.scaler_.transform(self._features(X)))

    def predict_proba(self, X):
        check_is_fitted(self, "clf_")
        return self.clf_.predict_proba(self.scaler_.transform(self._features(X)))

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


@dataclass
class ProbeResult:
    layer: int
    token_offset: int
    C: float
    val_auc: float
    probe: LayerTokenProbe = field(repr=False)
    n_fits: int = 1

    def score(self, tensors: Sequence[ActivationTensor]) -> float:
        """AUC of the selected probe on ``tensors``."""
        return auc(self.probe.decision_function(tensors), _labels(tensors))


def _fit_cell(feats_tr, y_tr, feats_va, y_va, layer, offset, cfg: ProbeConfig):
    best = None
    for c in cfg.c_grid:
        probe = LayerTokenProbe(layer, offset, c, cfg.max_iter, cfg.tol, cfg.standardize)
        # reuse precomputed features; mirrors LayerTokenProbe.fit
        probe.scaler_ = StandardScaler(with_mean=cfg.standardize, with_std=cfg.standardize).fit(feats_tr)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            probe.clf_ = LogisticRegression(C=c, max_iter=cfg.max_iter, tol=cfg.tol, solver="lbfgs").fit(
                probe.scaler_.transform(feats_tr), y_tr
            )
        probe.classes_ = probe.clf_.classes_
        score = auc(probe.clf_.decision_function(probe.scaler_.transform(feats_va)), y_va)
        # strict improvement keeps the larger C on ties (grid is scanned large to small)
        if best is None or score > best.val_auc:
            best = ProbeResult(layer, offset, float(c), score, probe)
    return best


def _check_two_classes(y, what):
    if np.unique(y).size < 2:
        raise ValueError(f"{what} data contains a single class")


def fit_probe(train, val, layer: int, token_offset: int, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Fit one probe per C at ``(layer, token_offset)``; keep the best on ``val``."""
    cfg = cfg or ProbeConfig()
    y_tr, y_va = _labels(train), _labels(val)
    _check_two_classes(y_tr, "training")
    _check_two_classes(y_va, "validation")
    n_layers = train[0].n_layers
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} outside [0, {n_layers})")
    res = _fit_cell(
        cell_features(train, layer, token_offset), y_tr,
        cell_features(val, layer, token_offset), y_va,
        layer, token_offset, cfg,
    )
    res.n_fits = len(cfg.c_grid)
    return res


def _sweep(train, val, offsets: TokenOffsetSet, cfg: ProbeConfig) -> list[list[ProbeResult]]:
    y_tr, y_va = _labels(train), _labels(val)
    _check_two_classes(y_tr, "training")
    _check_two_classes(y_va, "validation")
    grid = []
    for layer in range(train[0].n_layers):
        row = []
        for o in offsets:
            row.append(_fit_cell(cell_features(train, layer, o), y_tr, cell_features(val, layer, o), y_va,
                                 layer, o, cfg))
        grid.append(row)
    return grid


def probe_star(train, val, offsets: TokenOffsetSet | None = None, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Best (layer, offset, C) probe by validation AUC.

    Ties go to the lower layer, then the earlier offset, then the larger C.
    """
    offsets = offsets or TokenOffsetSet()
    cfg = cfg or ProbeConfig()
    grid = _sweep(train, val, offsets, cfg)
    best = None
    for row in grid:
        for cell in row:
            if best is None or cell.val_auc > best.val_auc:
                best = cell
    best.n_fits = len(grid) * len(offsets) * len(cfg.c_grid)
    return best


def token_probe(train, val, token_offset: int, cfg: ProbeConfig | None = None) -> ProbeResult:
    """``Token[n]``: best layer and C for a fixed token offset."""
    return probe_star(train, val, TokenOffsetSet((token_offset,)), cfg)


@dataclass
class Heatmap:
    test_auc: np.ndarray
    val_auc: np.ndarray
    offsets: tuple[int, ...]
    best_C: np.ndarray

    @property
    def argmax(self) -> tuple[int, int]:
        """(layer, offset) of the best test cell."""
        l, j = np.unravel_index(int(np.argmax(self.test_auc)), self.test_auc.shape)
        return int(l), self.offsets[j]

    def to_dict(self) -> dict:
        layer, offset = self.argmax
        return {
            "offsets": list(self.offsets),
            "test_auc": self.test_auc.tolist(),
            "val_auc": self.val_auc.tolist(),
            "best_C": self.best_C.tolist(),
            "argmax": {"layer": layer, "offset": offset},
        }


def heatmap(train, val, test, offsets: TokenOffsetSet | None = None, cfg: ProbeConfig | None = None) -> Heatmap:
    """Test AUC of the val-selected probe at every (layer, offset) cell."""
    offsets = offsets or TokenOffsetSet()
    cfg = cfg or ProbeConfig()
    _check_two_classes(_labels(test), "test")
    grid = _sweep(train, val, offsets, cfg)
    test_auc = np.array([[cell.score(test) for cell in row] for row in grid])
    val_auc = np.array([[cell.val_auc for cell in row] for row in grid])
    best_c = np.array([[cell.C for cell in row] for row in grid])
    return Heatmap(test_auc, val_auc, tuple(offsets), best_c)


def render_heatmap(hm: Heatmap, path, title: str | None = None) -> None:
    """Write the heatmap as a vector figure with the best cell boxed."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    n_layers, n_off = hm.test_auc.shape
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n_off, 1.0 + 0.45 * n_layers))
    im = ax.imshow(hm.test_auc, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto", origin="lower")
    ax.set_xticks(range(n_off), [str(o) for o in hm.offsets])
    ax.set_yticks(range(n_layers))
    ax.set_xlabel("token")
    ax.set_ylabel("layer")
    for l in range(n_layers):
        for j in range(n_off):
            ax.text(j, l, f"{100 * hm.test_auc[l, j]:.0f}", ha="center", va="center", fontsize=7, color="w")
    l, j = np.unravel_index(int(np.argmax(hm.test_auc)), hm.test_auc.shape)
    ax.add_patch(Rectangle((j - 0.5, l - 0.5), 1, 1, fill=False, edgecolor="red", linewidth=2))
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="test AUC")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


class ScoreSource(str, enum.Enum):
    LOGITS = "logits"
    PROBAS = "probas"


class Reducer(str, enum.Enum):
    MEAN = "mean"
    MIN = "min"
    MAX = "max"


@dataclass(frozen=True)
class AggregatorKind:
    source: ScoreSource = ScoreSource.PROBAS
    reducer: Reducer = Reducer.MEAN

    def __post_init__(self):
        object.__setattr__(self, "source", ScoreSource(self.source))
        object.__setattr__(self, "reducer", Reducer(self.reducer))

    @property
    def name(self) -> str:
        prefix = "Logits" if self.source is ScoreSource.LOGITS else "Probas"
        return f"{prefix}-{self.reducer.value}"


ALL_AGGREGATORS = tuple(AggregatorKind(s, r) for s in ScoreSource for r in Reducer)


def aggregate_score(per_token_scores, kind: AggregatorKind) -> float:
    """Reduce a response's chosen-token scores to one detector score."""
    scores = np.asarray(per_token_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("empty score sequence")
    reducer = Reducer(kind.reducer)
    if reducer is Reducer.MEAN:
        return float(scores.mean())
    if reducer is Reducer.MIN:
        return float(scores.min())
    return float(scores.max())


def aggregator_auc(token_logits, token_probas, labels, kind: AggregatorKind) -> float:
    """Test AUC of a training-free aggregator, reported as-is (may be < 0.5)."""
    seqs = token_logits if kind.source is ScoreSource.LOGITS else token_probas
    return auc([aggregate_score(s, kind) for s in seqs], labels)
