import pytest
import torch
import torch.nn as nn

from landmark_diffusion.network import (
    AttentionBlock,
    DenoisingUNet,
    NetworkConfig,
    build_network,
    convert_to_detector,
    parameter_count,
)

TOY = NetworkConfig(
    image_size=16,
    base_channels=8,
    channel_multipliers=(1, 2),
    res_blocks_per_level=1,
    attention_resolution=8,
    attention_heads=4,
)


class TestConfig:
    def test_rejects_indivisible_resolution(self):
        cfg = NetworkConfig(image_size=60, channel_multipliers=(1, 2, 4, 8))
        with pytest.raises(ValueError, match="divisible"):
            cfg.validate()

    def test_rejects_empty_multipliers(self):
        with pytest.raises(ValueError, match="non-empty"):
            NetworkConfig(channel_multipliers=()).validate()

    def test_rejects_bad_out_channels(self):
        with pytest.raises(ValueError):
            NetworkConfig(out_channels=0).validate()

    def test_json_roundtrip_and_hash(self):
        cfg = NetworkConfig(image_size=64, base_channels=16)
        again = NetworkConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.hash() == cfg.hash()
        assert NetworkConfig(image_size=32, base_channels=16).hash() != cfg.hash()


class TestArchitecture:
    def test_attention_only_at_configured_resolution(self):
        # 64x64 with multipliers (1,2,4,8) -> sides 64/32/16/8
        cfg = NetworkConfig(
            image_size=64,
            base_channels=8,
            channel_multipliers=(1, 2, 4, 8),
            res_blocks_per_level=1,
            attention_resolution=32,
        )
        net = build_network(cfg)
        down_has_attn = [isinstance(m, AttentionBlock) for m in net.down_attn]
        up_has_attn = [isinstance(m, AttentionBlock) for m in net.up_attn]
        assert down_has_attn == [False, True, False, False]
        assert up_has_attn == [False, False, True, False]  # up path is reversed

    def test_output_shape_preserved(self):
        net = build_network(TOY)
        x = torch.randn(2, 1, 16, 16)
        assert net(x, torch.tensor([3, 7])).shape == (2, 1, 16, 16)

    def test_multichannel_head_shape(self):
        cfg = NetworkConfig(
            image_size=16,
            out_channels=6,
            base_channels=8,
            channel_multipliers=(1, 2),
            res_blocks_per_level=1,
            attention_resolution=8,
            timestep_conditioning=False,
        )
        net = build_network(cfg)
        assert net(torch.randn(1, 1, 16, 16)).shape == (1, 6, 16, 16)

    def test_deterministic_forward(self):
        net = build_network(TOY)
        x = torch.randn(1, 1, 16, 16)
        t = torch.tensor([5])
        torch.testing.assert_close(net(x, t), net(x, t), rtol=0, atol=0)

    def test_missing_timestep_rejected(self):
        net = build_network(TOY)
        with pytest.raises(ValueError, match="timestep"):
            net(torch.randn(1, 1, 16, 16))

    def test_wrong_spatial_shape_rejected(self):
        net = build_network(TOY)
        with pytest.raises(ValueError, match="expected"):
            net(torch.randn(1, 1, 32, 32), torch.tensor([1]))

    def test_parameter_count_regression(self):
        # frozen values: parameter count is a pure function of the config
        assert parameter_count(TOY) == 42961
        assert (
            parameter_count(
                NetworkConfig(
                    image_size=64,
                    base_channels=8,
                    channel_multipliers=(1, 2, 4),
                    res_blocks_per_level=1,
                    attention_resolution=16,
                )
            )
            == 169601
        )


class TestHeadSwap:
    def make_denoiser(self):
        torch.manual_seed(0)
        return build_network(TOY)

    def test_non_final_tensors_bitwise_equal(self):
        net = self.make_denoiser()
        det = convert_to_detector(net, 19, generator=torch.Generator().manual_seed(1))
        src = net.state_dict()
        for key, value in det.state_dict().items():
            if key.startswith("out_conv."):
                continue
            assert torch.equal(value, src[key]), key

    def test_final_layer_channels(self):
        det = convert_to_detector(self.make_denoiser(), 19)
        assert det.out_conv.weight.shape[0] == 19
        assert det.config.out_channels == 19
        assert det.config.timestep_conditioning is False
        assert torch.all(det.out_conv.bias == 0)

    def test_detector_forward_finite_and_shaped(self):
        det = convert_to_detector(self.make_denoiser(), 5)
        out = det(torch.randn(1, 1, 16, 16))
        assert out.shape == (1, 5, 16, 16)
        assert torch.isfinite(out).all()

    def test_detector_invariant_to_timestep(self):
        det = convert_to_detector(self.make_denoiser(), 3)
        x = torch.randn(1, 1, 16, 16)
        torch.testing.assert_close(det(x, torch.tensor([1])), det(x, torch.tensor([499])), rtol=0, atol=0)
        torch.testing.assert_close(det(x), det(x, torch.tensor([250])), rtol=0, atol=0)

    def test_rejects_non_denoiser_source(self):
        det = convert_to_detector(self.make_denoiser(), 2)
        with pytest.raises(ValueError, match="1-channel denoiser"):
            convert_to_detector(det, 2)

    def test_rejects_bad_landmark_count(self):
        with pytest.raises(ValueError):
            convert_to_detector(self.make_denoiser(), 0)
