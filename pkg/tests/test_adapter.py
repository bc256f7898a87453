import warnings

import numpy as np
import pytest
import torch
from torch import nn

from p2mark.adapter import (
    WMLoRAConv1d,
    WMLoRALinear,
    count_conv1d,
    inject_adapters,
    merge_adapter,
    verify_merge_equivalence,
    wmlora_forward,
)
from p2mark.errors import ConfigurationError, StructuralError
from p2mark.models.generator import GeneratorConfig, ToyVocoder

SMALL = GeneratorConfig(in_channels=16, channels=[16, 8, 8], upsample_factors=[4, 2], resblock_dilations=[1])


def randomize_b(adapted, seed, scale=0.1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for ad in adapted.adapters().values():
            ad.lora_B.copy_(torch.randn(ad.lora_B.shape, generator=g) * scale)


def conv_oracle(x, w0, bias, A, B, s, padding, dilation):
    """Direct numpy evaluation of W0*x + B diag(s) (A*x) with an explicit loop."""
    c_out, c_in, k = w0.shape
    w = w0 + np.einsum("or,r,rik->oik", B, s, A)
    xp = np.pad(x, ((0, 0), (padding, padding)))
    n_out = xp.shape[1] - dilation * (k - 1)
    y = np.zeros((c_out, n_out))
    for t in range(n_out):
        patch = xp[:, t : t + dilation * k : dilation]
        y[:, t] = np.einsum("oik,ik->o", w, patch) + bias
    return y


class TestLinear:
    def test_hand_case(self):
        base = nn.Linear(2, 2, bias=False).double()
        with torch.no_grad():
            base.weight.copy_(torch.eye(2))
        ad = WMLoRALinear(base, 1).double()
        with torch.no_grad():
            ad.lora_B.copy_(torch.tensor([[1.0], [0.0]]))
            ad.lora_A.copy_(torch.tensor([[0.0, 1.0]]))
        s = torch.tensor([2.0], dtype=torch.float64)
        y = wmlora_forward(torch.tensor([3.0, 4.0], dtype=torch.float64), ad, s)
        assert y.tolist() == [11.0, 4.0]
        merged = merge_adapter(ad, s, "1")
        assert merged.weight.tolist() == [[1.0, 2.0], [0.0, 1.0]]
        assert merged.watermark_id == "1"

    def test_zero_b_is_transparent(self):
        torch.manual_seed(0)
        base = nn.Linear(6, 5)
        ad = WMLoRALinear(base, 3)
        x = torch.randn(4, 6)
        assert torch.equal(ad(x, torch.randn(3)), base(x))
        assert torch.equal(merge_adapter(ad, torch.randn(3)).weight, base.weight)

    def test_unit_scale_is_plain_lora(self):
        torch.manual_seed(1)
        ad = WMLoRALinear(nn.Linear(6, 5), 3).double()
        with torch.no_grad():
            ad.lora_B.normal_()
        x = torch.randn(4, 6, dtype=torch.float64)
        expected = ad.base(x) + x @ (ad.lora_B @ ad.lora_A).T
        torch.testing.assert_close(ad(x, torch.ones(3, dtype=torch.float64)), expected)
        # the all-zero watermark still applies BA: the update is not zero
        torch.testing.assert_close(
            merge_adapter(ad, torch.ones(3, dtype=torch.float64)).weight, ad.base.weight + ad.lora_B @ ad.lora_A
        )

    def test_rank_mismatch(self):
        ad = WMLoRALinear(nn.Linear(4, 4), 2)
        with pytest.raises(ConfigurationError):
            ad(torch.randn(1, 4), torch.ones(3))
        with pytest.raises(ConfigurationError):
            merge_adapter(ad, torch.ones(5))

    def test_rank_above_min_dim_warns(self):
        with pytest.warns(UserWarning):
            WMLoRALinear(nn.Linear(4, 2), 3)


class TestConv:
    @pytest.mark.parametrize("k,dilation,padding", [(1, 1, 0), (3, 1, 1), (3, 3, 3), (7, 1, 3)])
    def test_matches_numpy_oracle(self, k, dilation, padding):
        torch.manual_seed(k * 10 + dilation)
        base = nn.Conv1d(4, 5, k, padding=padding, dilation=dilation).double()
        ad = WMLoRAConv1d(base, 3).double()
        with torch.no_grad():
            ad.lora_B.normal_()
        s = torch.randn(3, dtype=torch.float64)
        x = torch.randn(1, 4, 20, dtype=torch.float64)
        got = ad(x, s)[0].detach().numpy()
        want = conv_oracle(
            x[0].numpy(), base.weight.detach().numpy(), base.bias.detach().numpy(),
            ad.lora_A.detach().numpy(), ad.lora_B.detach().numpy(), s.numpy(), padding, dilation,
        )
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_two_conv_form_matches_merged_kernel(self):
        torch.manual_seed(3)
        base = nn.Conv1d(8, 6, 5, padding=2)
        ad = WMLoRAConv1d(base, 4)
        with torch.no_grad():
            ad.lora_B.normal_(std=0.3)
        s = 1 + 0.3 * torch.randn(4)
        x = torch.randn(3, 8, 50)
        merged = nn.Conv1d(8, 6, 5, padding=2)
        merged.load_state_dict({"weight": merge_adapter(ad, s).weight, "bias": base.bias})
        torch.testing.assert_close(ad(x, s), merged(x), atol=1e-5, rtol=0)

    def test_per_example_scaling(self):
        torch.manual_seed(4)
        ad = WMLoRAConv1d(nn.Conv1d(3, 3, 3, padding=1), 2)
        with torch.no_grad():
            ad.lora_B.normal_()
        x = torch.randn(2, 3, 10)
        s = torch.randn(2, 2)
        batched = ad(x, s)
        for i in range(2):
            torch.testing.assert_close(batched[i : i + 1], ad(x[i : i + 1], s[i]))

    def test_base_is_frozen(self):
        ad = WMLoRAConv1d(nn.Conv1d(3, 3, 3), 2)
        assert not any(p.requires_grad for p in ad.base.parameters())
        assert ad.lora_A.requires_grad and ad.lora_B.requires_grad
        assert torch.count_nonzero(ad.lora_B) == 0

    def test_grouped_rejected(self):
        with pytest.raises(ConfigurationError):
            WMLoRAConv1d(nn.Conv1d(4, 4, 3, groups=2), 2)


class TestInjection:
    def test_fresh_injection_is_bitwise_transparent(self):
        torch.manual_seed(0)
        gen = ToyVocoder(SMALL)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            adapted = inject_adapters(gen, 4)
        x = torch.randn(2, 16, 6)
        assert torch.equal(adapted(x, torch.randn(4)), gen(x))

    def test_all_conv1d_selector_counts(self):
        gen = ToyVocoder(SMALL)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            adapted = inject_adapters(gen, 4, "conv1d")
        assert len(adapted.adapter_names) == count_conv1d(gen)
        assert not any("ups" in n for n in adapted.adapter_names)

    def test_trainable_parameter_ledger(self):
        gen = ToyVocoder(SMALL)
        r = 4
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            adapted = inject_adapters(gen, r)
        expected = sum(
            r * (m.out_channels + m.in_channels * m.kernel_size[0]) for m in gen.modules() if type(m) is nn.Conv1d
        )
        trainable = sum(p.numel() for p in adapted.parameters() if p.requires_grad)
        assert trainable == expected

    def test_original_untouched(self):
        gen = ToyVocoder(SMALL)
        before = {k: v.clone() for k, v in gen.state_dict().items()}
        adapted = inject_adapters(gen, 2, "conv_pre")
        randomize_b(adapted, 0)
        assert all(torch.equal(before[k], v) for k, v in gen.state_dict().items())
        assert all(p.requires_grad for p in gen.parameters())

    def test_selector_variants(self):
        gen = ToyVocoder(SMALL)
        assert inject_adapters(gen, 2, r"^resblocks\.0\.").adapter_names == [
            "resblocks.0.convs1.0",
            "resblocks.0.convs2.0",
        ]
        picked = inject_adapters(gen, 2, lambda name, m: m.out_channels == 16).adapter_names
        assert picked == ["conv_pre"]
        with pytest.raises(ConfigurationError):
            inject_adapters(gen, 2, "no_such_layer")
        with pytest.raises(ConfigurationError):
            inject_adapters(gen, 2, include_transposed=True)


class TestMergeEquivalence:
    def test_zero_b_exact(self):
        torch.manual_seed(1)
        gen = ToyVocoder(SMALL)
        adapted = inject_adapters(gen, 4, r"^(conv_pre|resblocks)")
        s = torch.randn(4)
        merged = adapted.merged_generator(s, gen)
        probes = [torch.randn(1, 16, 5) for _ in range(5)]
        assert verify_merge_equivalence(adapted, merged, probes, s) == 0.0

    def test_random_adapter_within_tolerance(self):
        torch.manual_seed(2)
        gen = ToyVocoder(SMALL)
        adapted = inject_adapters(gen, 4, r"^(conv_pre|resblocks)")
        randomize_b(adapted, 3)
        s = 1 + 0.2 * torch.randn(4)
        merged = adapted.merged_generator(s, gen)
        probes = [torch.randn(1, 16, 5) for _ in range(10)]
        assert verify_merge_equivalence(adapted, merged, probes, s) < 1e-5

    def test_wrong_scaling_is_detected(self):
        torch.manual_seed(3)
        gen = ToyVocoder(SMALL)
        adapted = inject_adapters(gen, 4, r"^(conv_pre|resblocks)")
        randomize_b(adapted, 4)
        s1, s2 = torch.ones(4), torch.ones(4) + 0.5
        merged = adapted.merged_generator(s1, gen)
        assert verify_merge_equivalence(adapted, merged, [torch.randn(1, 16, 5)], s2) > 1e-4

    def test_architecture_mismatch(self):
        gen = ToyVocoder(SMALL)
        adapted = inject_adapters(gen, 2, "conv_pre")
        other = ToyVocoder(GeneratorConfig(in_channels=16, channels=[8, 8, 8], upsample_factors=[4, 2]))
        with pytest.raises(StructuralError):
            verify_merge_equivalence(adapted, other, [torch.randn(1, 16, 5)], torch.ones(2))
