import pytest
import torch
from hypothesis import given, settings, strategies as st

from vapdiff.denoiser import ConditionSet, Denoiser, DenoiserConfig
from vapdiff.errors import ConfigError, NumericError, ValidationError

TINY = dict(channels=2, height=8, width=8, patch_size=4, embed_dim=16, heads=2, text_dim=6,
            encoder_depth=1, middle_depth=1, decoder_depth=1)


def cond(batch, text_dim=None, extra=None, classes=3):
    return ConditionSet(
        t=torch.arange(1, batch + 1),
        c=torch.arange(batch) % classes,
        text=torch.randn(batch, text_dim) if text_dim else None,
        extra_tokens=extra,
    )


def test_config_rejects_bad_patch_and_depths():
    with pytest.raises(ConfigError) as exc:
        DenoiserConfig(height=30, patch_size=4)
    assert exc.value.field == "patch_size"
    with pytest.raises(ConfigError):
        DenoiserConfig(encoder_depth=2, decoder_depth=1)


@pytest.mark.parametrize("text, extra, expected", [(False, 0, 2 + 4), (True, 0, 3 + 4), (True, 2, 5 + 4)])
def test_token_count(text, extra, expected):
    model = Denoiser(DenoiserConfig(**TINY))
    x = torch.randn(2, 2, 8, 8)
    extra_tokens = torch.randn(2, extra, 16) if extra else None
    c = cond(2, 6 if text else None, extra_tokens)
    tokens = model.embed_inputs(x, c)
    assert tokens.shape == (2, expected, 16)
    out, feats = model(x, c, return_features=True)
    assert out.shape == x.shape
    assert feats.tokens.shape[1] == expected


def test_zero_depth_encoder_is_identity_and_pooled_is_mean():
    model = Denoiser(DenoiserConfig(**(TINY | dict(encoder_depth=0, decoder_depth=0))))
    tokens = torch.randn(3, 7, 16)
    feats = model.encode(tokens)
    assert torch.equal(feats.tokens, tokens)
    assert feats.skips == []
    torch.testing.assert_close(feats.pooled, tokens.sum(dim=1) / 7)


def test_pooled_matches_manual_mean_of_encoder_output():
    model = Denoiser(DenoiserConfig(**TINY))
    tokens = torch.randn(2, 6, 16)
    h = tokens
    for block in model.encoder:
        h = block(h)
    feats = model.encode(tokens)
    torch.testing.assert_close(feats.pooled, h.mean(dim=1))


def test_skip_pairing_is_mirrored():
    cfg = DenoiserConfig(**(TINY | dict(encoder_depth=3, decoder_depth=3, middle_depth=0)))
    model = Denoiser(cfg)
    seen = []
    for i, block in enumerate(model.decoder):
        block.register_forward_hook(lambda m, args, out, i=i: seen.append((i, args[1])))
    tokens = torch.randn(1, 6, 16)
    feats = model.encode(tokens)
    model.decode(feats.tokens, feats.skips)
    assert [i for i, _ in seen] == [0, 1, 2]
    for i, skip in seen:
        assert skip is feats.skips[2 - i]


def test_condition_validation():
    model = Denoiser(DenoiserConfig(**TINY))
    x = torch.randn(2, 2, 8, 8)
    with pytest.raises(ValidationError):
        model(x, ConditionSet(t=torch.tensor([1, 2]), c=torch.tensor([0, 3])))
    with pytest.raises(ValidationError):
        model(x, ConditionSet(t=torch.tensor([1, 2]), c=torch.tensor([0, 1]), text=torch.randn(2, 5)))
    with pytest.raises(ValidationError) as exc:
        model(torch.randn(2, 3, 8, 8), cond(2))
    assert exc.value.field == "latent"


def test_deterministic_forward():
    model = Denoiser(DenoiserConfig(**TINY)).eval()
    x, c = torch.randn(2, 2, 8, 8), cond(2, 6)
    assert torch.equal(model(x, c), model(x, c))


def test_nonfinite_output_names_a_layer():
    model = Denoiser(DenoiserConfig(**TINY))
    with torch.no_grad():
        model.encoder[0].mlp[0].weight.fill_(float("nan"))
    with pytest.raises(NumericError, match="encoder block 0"):
        model(torch.randn(1, 2, 8, 8), cond(1))


@settings(max_examples=15, deadline=None)
@given(batch=st.integers(1, 4), t=st.integers(1, 1000))
def test_output_shape_matches_latent(batch, t):
    model = Denoiser(DenoiserConfig(**TINY))
    x = torch.randn(batch, 2, 8, 8)
    c = ConditionSet(t=torch.full((batch,), t), c=torch.zeros(batch, dtype=torch.long))
    assert model(x, c).shape == x.shape


@pytest.mark.slow
def test_trained_model_is_class_sensitive():
    torch.manual_seed(0)
    cfg = DenoiserConfig(**(TINY | dict(channels=1, height=4, width=4, patch_size=2, class_count=2)))
    model = Denoiser(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    # target noise depends only on the class
    targets = torch.stack([torch.ones(1, 4, 4), -torch.ones(1, 4, 4)])
    for _ in range(200):
        c = torch.randint(0, 2, (16,))
        x = torch.randn(16, 1, 4, 4)
        loss = ((model(x, ConditionSet(t=torch.randint(1, 100, (16,)), c=c)) - targets[c]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    x = torch.randn(4, 1, 4, 4)
    t = torch.full((4,), 50)
    a = model(x, ConditionSet(t=t, c=torch.zeros(4, dtype=torch.long)))
    b = model(x, ConditionSet(t=t, c=torch.ones(4, dtype=torch.long)))
    assert (a - b).abs().mean() > 0.5
