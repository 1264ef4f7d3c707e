"""scikit-learn style wrappers around training, scoring, generation and analysis.

Inputs follow :func:`duplexlm.validation.check_dialogues`: a corpus path, a list of
:class:`DialogueSample`, or an integer array of shape ``[n, 2, T]``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .generator import GenConfig, generate_batch
from .model import DlmConfig
from .trainer import TrainConfig, evaluate_model, prepare, train
from .turn_taking import STAT_KINDS, analyze_dialogue
from .validation import check_dialogues


class DialogueLanguageModel(BaseEstimator):
    """Two-channel unit language model.

    ``ablation_id`` selects one of the objective/architecture variants (0 to 5);
    leave it ``None`` to use the individual switches.
    """

    def __init__(self, vocab_size=100, n_layers=4, n_heads=4, embed_dim=64, context_len=257,
                 n_cross_layers=4, use_edge_prediction=True, use_duration_prediction=True, delta=1,
                 architecture="dlm", ablation_id=None, lr=5e-4, warmup_frac=0.01, batch_size=8,
                 window_frames=256, max_steps=2000, temperature=1.0, top_k=0, random_state=0):
        self.vocab_size = vocab_size
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.context_len = context_len
        self.n_cross_layers = n_cross_layers
        self.use_edge_prediction = use_edge_prediction
        self.use_duration_prediction = use_duration_prediction
        self.delta = delta
        self.architecture = architecture
        self.ablation_id = ablation_id
        self.lr = lr
        self.warmup_frac = warmup_frac
        self.batch_size = batch_size
        self.window_frames = window_frames
        self.max_steps = max_steps
        self.temperature = temperature
        self.top_k = top_k
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        model = DlmConfig(
            vocab_size=self.vocab_size, n_layers=self.n_layers, n_heads=self.n_heads,
            embed_dim=self.embed_dim, context_len=self.context_len, n_cross_layers=self.n_cross_layers,
            use_edge_prediction=self.use_edge_prediction,
            use_duration_prediction=self.use_duration_prediction and self.use_edge_prediction,
            delta=self.delta, architecture=self.architecture,
        )
        return TrainConfig(
            model=model, ablation_id=self.ablation_id, lr=self.lr, warmup_frac=self.warmup_frac,
            batch_size=self.batch_size, window_frames=self.window_frames, max_steps=self.max_steps,
            eval_interval=self.max_steps, split_fractions=(1.0, 0.0, 0.0), eval_split="train",
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        """Train on every dialogue of ``X`` (no held-out split)."""
        cfg = self._train_config()
        samples = check_dialogues(X, vocab_size=self.vocab_size)
        result = train(cfg, samples)
        self.model_ = result.model
        self.train_report_ = result.reports[-1]
        self.n_steps_ = result.steps
        return self

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, prepare(check_dialogues(X, vocab_size=self.vocab_size)),
                              min(self.window_frames, self.model_.cfg.max_units), split="score")

    def score(self, X, y=None) -> float:
        """Negative mean edge NLL (higher is better)."""
        return -self.evaluate(X).edge_nll

    def generate(self, X, n_frames: int = 100, n_samples: int = 1) -> np.ndarray:
        """Continue each prompt; returns ``[n_prompts * n_samples, 2, T + n_frames]``."""
        check_is_fitted(self, "model_")
        prompts = check_dialogues(X, vocab_size=self.vocab_size, allow_empty=True)
        cfg = GenConfig(temperature=self.temperature, top_k=self.top_k, max_new_frames=n_frames,
                        seed=int(self.random_state or 0))
        out = []
        for i, p in enumerate(prompts):
            frames, _ = generate_batch(self.model_, p.to_array(), cfg,
                                       [[cfg.seed, i, k] for k in range(n_samples)])
            out.append(frames)
        if not out:
            return np.zeros((0, 2, n_frames), dtype=np.int64)
        if len({f.shape[2] for f in out}) > 1:
            raise ValueError("prompts of unequal length; use generator.batch_generate instead")
        return np.concatenate(out)

    predict = generate


class TurnTakingAnalyzer(TransformerMixin, BaseEstimator):
    """Per-dialogue turn-taking features: the eight per-minute count/duration columns."""

    def __init__(self, silence_unit=0, min_silence_ms=200):
        self.silence_unit = silence_unit
        self.min_silence_ms = min_silence_ms

    def fit(self, X=None, y=None):
        self.feature_names_out_ = np.array(
            [f"{k.lower()}_per_min" for k in STAT_KINDS] + [f"{k.lower()}_s_per_min" for k in STAT_KINDS]
        )
        self.n_features_out_ = len(self.feature_names_out_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "feature_names_out_")
        rows = []
        for s in check_dialogues(X):
            _, st = analyze_dialogue(s, self.silence_unit, self.min_silence_ms)
            row = st.table_row()
            rows.append([row[c] for c in self.feature_names_out_])
        return np.asarray(rows, dtype=float).reshape(-1, self.n_features_out_)

    def get_feature_names_out(self, input_features: Optional[list] = None) -> np.ndarray:
        check_is_fitted(self, "feature_names_out_")
        return self.feature_names_out_.copy()
