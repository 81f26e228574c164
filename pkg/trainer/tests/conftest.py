import pytest

from miner_trainer import data, train


@pytest.fixture(scope="session")
def toy_small(tmp_path_factory):
    """A small corpus + pretrained base shared by the unit tests."""
    root = tmp_path_factory.mktemp("toy_small")
    corpus_path, triples_path = data.make_toy_corpus(
        root / "data", n_docs=12, facts_per_doc=2, seed=1
    )
    base_dir, base_losses = train.build_toy_base(
        corpus_path,
        triples_path,
        root / "base",
        d_model=48,
        epochs=8,
        seed=1,
    )
    return {
        "root": root,
        "corpus_path": corpus_path,
        "triples_path": triples_path,
        "base_dir": base_dir,
        "base_losses": base_losses,
        "docs": data.load_corpus_file(corpus_path),
        "triples": data.load_triples_file(triples_path),
    }


def make_spec(toy, out_dir, **overrides) -> train.TrainSpec:
    fields = dict(
        base_model=str(toy["base_dir"]),
        corpus_path=str(toy["corpus_path"]),
        triples_path=str(toy["triples_path"]),
        output_dir=str(out_dir),
        learning_rate=1e-3,
        lora_rank=8,
        lora_alpha=16,
        lora_dropout=0.05,
        epochs=2,
        seed=0,
    )
    fields.update(overrides)
    return train.TrainSpec(**fields)
