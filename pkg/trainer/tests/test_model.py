import torch
import pytest

from miner_trainer import model as model_mod
from miner_trainer.data import Vocab


def _tiny_setup(seed=0, vocab_words="alpha beta gamma delta epsilon zeta."):
    torch.manual_seed(seed)
    vocab = Vocab.build([vocab_words])
    cfg = model_mod.ModelConfig(
        vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=32
    )
    return model_mod.TinyCausalLM(cfg), vocab


class TestLoRAWrapping:
    def test_base_parameters_freeze_and_adapters_train(self):
        model, _ = _tiny_setup()
        model_mod.apply_lora(model, rank=4, alpha=8, dropout=0.05)
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        assert trainable, "no trainable parameters after wrapping"
        assert all("lora_a" in n or "lora_b" in n for n in trainable)
        frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
        assert any("tok_emb" in n for n in frozen)
        assert any("head" in n and "lora" not in n for n in frozen)

    def test_every_linear_gets_an_adapter(self):
        model, _ = _tiny_setup()
        model_mod.apply_lora(model, rank=4, alpha=8, dropout=0.05)
        names = model_mod.adapted_module_names(model)
        # per block: q, k, v, proj, ff1, ff2 — plus the output head
        assert len(names) == 6 * model.cfg.n_layers + 1
        assert "head" in names

    def test_fresh_wrap_preserves_base_outputs(self):
        model, vocab = _tiny_setup()
        model.eval()
        ids = torch.tensor([vocab.encode("alpha beta gamma")])
        before = model(ids)
        model_mod.apply_lora(model, rank=8, alpha=16, dropout=0.1)
        model.eval()
        after = model(ids)
        assert torch.equal(before, after)

    def test_delta_scales_by_alpha_over_rank(self):
        torch.manual_seed(3)
        base = torch.nn.Linear(6, 4)
        wrapped = model_mod.LoRALinear(base, rank=2, alpha=8, dropout=0.0)
        with torch.no_grad():
            wrapped.lora_a.copy_(torch.randn(2, 6))
            wrapped.lora_b.copy_(torch.randn(4, 2))
        wrapped.eval()
        x = torch.randn(5, 6)
        expected = base(x) + (8 / 2) * x @ wrapped.lora_a.T @ wrapped.lora_b.T
        assert torch.allclose(wrapped(x), expected, atol=1e-6)

    def test_dropout_only_in_training_mode(self):
        torch.manual_seed(4)
        base = torch.nn.Linear(8, 8)
        wrapped = model_mod.LoRALinear(base, rank=4, alpha=8, dropout=0.5)
        with torch.no_grad():
            wrapped.lora_b.copy_(torch.randn(8, 4))
        x = torch.randn(3, 8)
        wrapped.eval()
        assert torch.equal(wrapped(x), wrapped(x))
        wrapped.train()
        assert not torch.equal(wrapped(x), wrapped(x))


class TestPersistence:
    def test_base_round_trip(self, tmp_path):
        model, vocab = _tiny_setup()
        model_mod.save_base(model, vocab, tmp_path / "base")
        loaded, loaded_vocab = model_mod.load_base(tmp_path / "base")
        assert loaded_vocab.itos == vocab.itos
        ids = torch.tensor([vocab.encode("alpha beta")])
        model.eval()
        assert torch.equal(model(ids), loaded(ids))

    def test_missing_base_raises(self, tmp_path):
        with pytest.raises(model_mod.AdapterError, match="base model not found"):
            model_mod.load_base(tmp_path / "nowhere")

    def test_adapter_round_trip(self, tmp_path):
        model, vocab = _tiny_setup()
        model_mod.save_base(model, vocab, tmp_path / "base")
        model_mod.apply_lora(model, rank=4, alpha=16, dropout=0.05)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if "lora_b" in name:
                    param.copy_(torch.randn_like(param) * 0.1)
        model_mod.save_adapter(
            model, tmp_path / "adapter", base_dir=tmp_path / "base",
            rank=4, alpha=16, dropout=0.05,
        )
        reloaded, _ = model_mod.load_adapter(tmp_path / "adapter")
        ids = torch.tensor([vocab.encode("alpha beta gamma")])
        model.eval()
        assert torch.allclose(model(ids), reloaded(ids), atol=1e-6)

    def test_manifest_records_adapted_modules(self, tmp_path):
        model, vocab = _tiny_setup()
        model_mod.save_base(model, vocab, tmp_path / "base")
        model_mod.apply_lora(model, rank=4, alpha=8, dropout=0.1)
        model_mod.save_adapter(
            model, tmp_path / "adapter", base_dir=tmp_path / "base",
            rank=4, alpha=8, dropout=0.1,
        )
        manifest = model_mod.read_manifest(tmp_path / "adapter")
        assert manifest["lora_rank"] == 4
        assert manifest["lora_alpha"] == 8
        assert manifest["lora_dropout"] == 0.1
        assert "head" in manifest["adapted_modules"]
        assert manifest["base_sha256"]

    def test_adapter_refuses_mismatched_base(self, tmp_path):
        model, vocab = _tiny_setup(seed=0)
        model_mod.save_base(model, vocab, tmp_path / "base")
        model_mod.apply_lora(model, rank=4, alpha=8, dropout=0.05)
        model_mod.save_adapter(
            model, tmp_path / "adapter", base_dir=tmp_path / "base",
            rank=4, alpha=8, dropout=0.05,
        )
        other, other_vocab = _tiny_setup(seed=99)
        model_mod.save_base(other, other_vocab, tmp_path / "other_base")
        with pytest.raises(model_mod.AdapterError, match="different base"):
            model_mod.load_adapter(tmp_path / "adapter", tmp_path / "other_base")

    def test_missing_adapter_raises(self, tmp_path):
        with pytest.raises(model_mod.AdapterError, match="adapter not found"):
            model_mod.load_adapter(tmp_path / "nowhere")


class TestGenerate:
    def _no_stop_model(self, seed=5):
        # vocabulary without "." and eos suppressed: generation runs the
        # full budget, which makes token-cap behavior exactly observable
        torch.manual_seed(seed)
        vocab = Vocab.build(["alpha beta gamma delta"])
        cfg = model_mod.ModelConfig(
            vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=256
        )
        model = model_mod.TinyCausalLM(cfg)
        with torch.no_grad():
            for special in (vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.stoi["<unk>"]):
                model.head.bias[special] = -100.0
        return model, vocab

    def test_greedy_is_deterministic(self):
        model, vocab = self._no_stop_model()
        first, _ = model_mod.generate(model, vocab, "alpha beta", max_new_tokens=10)
        second, _ = model_mod.generate(model, vocab, "alpha beta", max_new_tokens=10)
        assert first == second

    def test_budget_is_respected_exactly(self):
        model, vocab = self._no_stop_model()
        for budget in (1, 7, 100):
            text, finish = model_mod.generate(model, vocab, "alpha", max_new_tokens=budget)
            assert len(text.split()) == budget
            assert finish == "length"

    def test_stops_at_period(self):
        torch.manual_seed(6)
        vocab = Vocab.build(["alpha beta ."])
        cfg = model_mod.ModelConfig(
            vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=64
        )
        model = model_mod.TinyCausalLM(cfg)
        with torch.no_grad():
            model.head.bias.fill_(-100.0)
            model.head.bias[vocab.stoi["."]] = 100.0
        text, finish = model_mod.generate(model, vocab, "alpha", max_new_tokens=50)
        assert text == "."
        assert finish == "stop"

    def test_seeded_sampling_is_reproducible(self):
        model, vocab = self._no_stop_model()

        def sample():
            gen = torch.Generator()
            gen.manual_seed(42)
            return model_mod.generate(
                model, vocab, "alpha", max_new_tokens=20, temperature=1.0, generator=gen
            )[0]

        assert sample() == sample()
