import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from duplexlm.estimator import DialogueLanguageModel, TurnTakingAnalyzer
from duplexlm.synth import SynthConfig, synth_corpus
from duplexlm.turn_taking import analyze_dialogue

SMALL = dict(vocab_size=20, n_layers=2, n_heads=2, embed_dim=16, context_len=33, n_cross_layers=1,
             window_frames=32, batch_size=2, max_steps=5)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(SynthConfig(vocab_size=20, seed=9), 4, 120)


def test_params_roundtrip_and_clone():
    est = DialogueLanguageModel(**SMALL, ablation_id=3)
    params = est.get_params()
    assert params["ablation_id"] == 3 and params["embed_dim"] == 16
    c = clone(est)
    assert c.get_params() == params
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3


def test_fit_score_generate(corpus):
    est = DialogueLanguageModel(**SMALL).fit(corpus)
    assert est.n_steps_ == 5
    s = est.score(corpus)
    assert np.isfinite(s) and s < 0
    arrays = np.stack([c.crop(0, 10).to_array() for c in corpus])
    out = est.generate(arrays, n_frames=7, n_samples=2)
    assert out.shape == (8, 2, 17)
    assert np.array_equal(out[0, :, :10], arrays[0]) and np.array_equal(out[2, :, :10], arrays[1])
    assert np.array_equal(est.predict(arrays, n_frames=7, n_samples=2), out)


def test_unfitted_errors(corpus):
    with pytest.raises(NotFittedError):
        DialogueLanguageModel().score(corpus)
    with pytest.raises(NotFittedError):
        TurnTakingAnalyzer().transform(corpus)


def test_rejects_out_of_vocab(corpus):
    with pytest.raises(ValueError):
        DialogueLanguageModel(**dict(SMALL, vocab_size=5)).fit(corpus)


def test_analyzer_features(corpus):
    an = TurnTakingAnalyzer()
    X = an.fit_transform(corpus)
    assert X.shape == (4, 8)
    _, st = analyze_dialogue(corpus[1])
    assert X[1, 0] == st.count_per_min("IPU")
    assert list(an.get_feature_names_out())[:2] == ["ipu_per_min", "pause_per_min"]
    # composes with ordinary sklearn steps
    Z = make_pipeline(TurnTakingAnalyzer(), StandardScaler()).fit_transform(corpus)
    assert Z.shape == (4, 8)
