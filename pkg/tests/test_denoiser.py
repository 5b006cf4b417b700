import pytest
import torch

from cwdm.denoiser import (
    DenoiserConfig,
    DenoiserConfigError,
    build_denoiser,
    denoise,
    parameter_checksum,
    parameter_count,
)


def toy(**kw) -> DenoiserConfig:
    base = dict(base_channels=8, channel_multipliers=(1, 2), timesteps=100)
    return DenoiserConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def model():
    return build_denoiser(toy(), seed=3).eval()


@pytest.fixture
def X():
    return torch.randn(32, 16, 16, 16, generator=torch.Generator().manual_seed(0))


def test_full_scale_config_builds():
    cfg = DenoiserConfig()
    assert (cfg.base_channels, cfg.depth_levels, cfg.skip_mode) == (64, 4, "concatenation")
    assert cfg.in_channels == 8 * (1 + 3)
    assert parameter_count(build_denoiser(cfg)) > 0


@pytest.mark.parametrize("skip", ["concatenation", "additive"])
def test_parameter_count_grows_with_width(skip):
    counts = [parameter_count(build_denoiser(toy(base_channels=c, skip_mode=skip))) for c in (64, 96)]
    assert counts[1] > counts[0]


def test_skip_modes_differ_in_decoder_width():
    cat = build_denoiser(toy(skip_mode="concatenation"))
    add = build_denoiser(toy(skip_mode="additive"))
    for level_cat, level_add, w in zip(cat.up, add.up, reversed(toy().widths())):
        assert level_cat.blocks[0].conv1.in_channels == 2 * w
        assert level_add.blocks[0].conv1.in_channels == w
    assert parameter_count(add) < parameter_count(cat)


def test_same_seed_same_weights():
    a, b = build_denoiser(toy(), seed=9), build_denoiser(toy(), seed=9)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(build_denoiser(toy(), seed=10)) != parameter_checksum(a)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.random.get_rng_state()
    build_denoiser(toy(), seed=5)
    assert torch.equal(before, torch.random.get_rng_state())


def test_output_shape_and_determinism(model, X):
    out = denoise(model, X, 17)
    assert out.shape == (8, 16, 16, 16)
    assert torch.isfinite(out).all()
    assert torch.equal(out, denoise(model, X, 17))
    assert denoise(model, X[None].repeat(2, 1, 1, 1, 1), 17).shape == (2, 8, 16, 16, 16)


def test_time_sensitivity(model, X):
    assert (denoise(model, X, 1) - denoise(model, X, 100)).abs().max() > 0


def test_condition_sensitivity(model, X):
    perm = torch.cat([torch.arange(8), 8 + torch.randperm(24, generator=torch.Generator().manual_seed(1))])
    assert not torch.equal(denoise(model, X, 50), denoise(model, X[perm], 50))


def test_indivisible_dims_named_in_error():
    model = build_denoiser(toy(channel_multipliers=(1, 2, 4)))
    with pytest.raises(ValueError, match="divisible by 4"):
        denoise(model, torch.zeros(32, 8, 8, 6), 1)


def test_wrong_channel_count():
    with pytest.raises(ValueError, match="32 input channels"):
        denoise(build_denoiser(toy()), torch.zeros(24, 8, 8, 8), 1)


@pytest.mark.parametrize(
    "kw",
    [
        dict(base_channels=0),
        dict(skip_mode="residual"),
        dict(out_channels=4),
        dict(in_channels=12),
        dict(channel_multipliers=()),
        dict(base_channels=12),
        dict(attention_levels=(5,)),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(DenoiserConfigError):
        build_denoiser(toy(**kw))


def test_attention_variant_runs():
    model = build_denoiser(toy(attention_levels=(1,)))
    assert denoise(model, torch.zeros(32, 8, 8, 8), 3).shape == (8, 8, 8, 8)
