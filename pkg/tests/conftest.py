import pytest

from egohandid import corpus, synthgen


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """2 subjects x 2 gestures x 2 places x 1 repeat, short clips."""
    root = tmp_path_factory.mktemp("tiny-corpus")
    cfg = synthgen.make_config("clean", n_subjects=2, n_gestures=2, repeats=1,
                               base_length=6, length_jitter=2, seed=123)
    manifest = synthgen.generate_corpus(cfg, root)
    return root, manifest


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    root, _ = tiny_corpus
    return corpus.load_manifest(root / "manifest.jsonl")
