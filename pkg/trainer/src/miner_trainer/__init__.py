"""Train small LoRA adapters that memorize triple knowledge, then serve them.

The package covers the full loop for a fragment-completion miner:

- ``data``: linearize a corpus + triple store into training records,
  plus a deterministic toy-corpus generator for smoke runs.
- ``model``: a tiny word-level causal transformer and a LoRA wrapper
  that injects trainable low-rank deltas into every linear layer.
- ``train``: continued pretraining of the LoRA adapter from a
  declarative :class:`~miner_trainer.train.TrainSpec`.
- ``grid``: hyperparameter grid enumeration and selection by final loss.
- ``serve``: a chat-completions HTTP endpoint for a trained adapter,
  wire-compatible with OpenAI-style clients.
"""

__version__ = "0.1.0"
