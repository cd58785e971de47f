import pytest
import torch

from voxpatch.lm import LmConfig, TinyLm, Tokenizer
from voxpatch.lora import (
    LoraConfig,
    LoraLinear,
    adapters_state,
    attach_lora,
    has_lora,
    lm_base_state,
    lora_parameters,
)

CORPUS = ["a large thin ring", "a small box table"]


def make_model(seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer.from_corpus(CORPUS)
    cfg = LmConfig(vocab_size=len(tok), n_layers=5, model_dim=32, n_heads=4,
                   context=64, tap_layers=(1, 2, 3, 4, 5))
    return TinyLm(cfg)


def test_zero_init_adapter_is_identity():
    model = make_model()
    model.eval()
    emb = torch.randn(3, 10, 32)
    base_logits, base_taps = model.forward_embeddings(emb)
    attach_lora(model, LoraConfig(rank=4, alpha=4, dropout=0.05))
    model.eval()  # dropout off; B is zero-initialized
    logits, taps = model.forward_embeddings(emb)
    assert (logits == base_logits).all()
    assert (taps == base_taps).all()


def test_nonzero_b_changes_logits():
    model = make_model()
    model.eval()
    emb = torch.randn(1, 6, 32)
    base_logits, _ = model.forward_embeddings(emb)
    attach_lora(model, LoraConfig(rank=4, alpha=4, dropout=0.0))
    with torch.no_grad():
        model.blocks[0].attn.q_proj.lora_B.fill_(0.3)
    model.eval()
    logits, _ = model.forward_embeddings(emb)
    assert not torch.allclose(logits, base_logits)


def test_base_weights_frozen_and_lora_trainable():
    model = make_model()
    attach_lora(model, LoraConfig())
    wrapped = model.blocks[0].attn.q_proj
    assert isinstance(wrapped, LoraLinear)
    assert not wrapped.base.weight.requires_grad
    assert wrapped.lora_A.requires_grad and wrapped.lora_B.requires_grad
    names = [n for n, _ in model.named_parameters() if ".lora_" in n]
    assert len(names) == 5 * 4 * 2  # layers * projections * (A, B)
    assert len(list(lora_parameters(model))) == len(names)


def test_double_attach_rejected():
    model = make_model()
    attach_lora(model, LoraConfig())
    assert has_lora(model)
    with pytest.raises(ValueError):
        attach_lora(model, LoraConfig())


def test_base_state_names_survive_wrapping():
    model = make_model(seed=1)
    before = lm_base_state(model)
    attach_lora(model, LoraConfig())
    after = lm_base_state(model)
    assert sorted(before) == sorted(after)
    for name in before:
        assert (before[name] == after[name]).all()
    adapters = adapters_state(model)
    assert all(".lora_A" in n or ".lora_B" in n for n in adapters)
    for name, tensor in adapters.items():
        if name.endswith("lora_B"):
            assert (tensor == 0).all()


def test_scaling_follows_alpha_over_rank():
    base = torch.nn.Linear(8, 8)
    layer = LoraLinear(base, LoraConfig(rank=2, alpha=8, dropout=0.0))
    assert layer.scaling == 4.0
    with torch.no_grad():
        layer.lora_B.copy_(torch.ones_like(layer.lora_B))
    x = torch.randn(5, 8)
    delta = layer(x) - base(x)
    expected = 4.0 * (x @ layer.lora_A.t() @ layer.lora_B.t())
    assert torch.allclose(delta, expected, atol=1e-6)
