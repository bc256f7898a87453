"""WM-LoRA layers: a frozen base weight plus a low-rank update whose inner
diagonal is the watermark scaling vector, and their merge into plain weights."""

from __future__ import annotations

import copy
import math
import re
import warnings
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, StructuralError


class ScalingContext:
    """Holds the scaling vector seen by every adapter of one generator during a forward pass."""

    def __init__(self):
        self.value = None

    def get(self, rank: int) -> torch.Tensor:
        s = self.value
        if s is None:
            raise ConfigurationError("adapted layer called without a scaling vector")
        if s.shape[-1] != rank:
            raise ConfigurationError(f"scaling vector has length {s.shape[-1]}, adapter rank is {rank}")
        return s


class _WMLoRABase(nn.Module):
    def __init__(self, base: nn.Module, rank: int, context: ScalingContext | None):
        super().__init__()
        if rank < 1:
            raise ConfigurationError("rank must be positive")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.context = context or ScalingContext()
        d, k = self.fan_out, self.fan_in
        if rank > min(d, k):
            warnings.warn(
                f"rank {rank} exceeds min(d, k) = {min(d, k)} for {type(base).__name__}({d}x{k}); "
                "the update is over-parameterised",
                stacklevel=3,
            )

    def _scaling(self, s):
        if s is None:
            return self.context.get(self.rank)
        if s.shape[-1] != self.rank:
            raise ConfigurationError(f"scaling vector has length {s.shape[-1]}, adapter rank is {self.rank}")
        return s

    def lora_parameters(self):
        return [self.lora_A, self.lora_B]

    def delta_weight(self, s: torch.Tensor) -> torch.Tensor:
        """B diag(s) A reshaped like the base weight; s has shape (r,)."""
        s = self._scaling(s)
        if s.dim() != 1:
            raise ConfigurationError("merging needs a single scaling vector of shape (r,)")
        a = self.lora_A.reshape(self.rank, -1)
        delta = (self.lora_B * s[None, :]) @ a
        return delta.reshape(self.base.weight.shape)

    def merged_weight(self, s: torch.Tensor) -> torch.Tensor:
        return self.base.weight + self.delta_weight(s)


class WMLoRAConv1d(_WMLoRABase):
    """Conv1d with h = W0 * x + B diag(s) (A * x).

    At run time A is a conv with the base kernel size, stride, padding and
    dilation down to r channels, s scales each of those channels, and B is a
    pointwise conv back to C_out.
    """

    def __init__(self, base: nn.Conv1d, rank: int, context: ScalingContext | None = None):
        if base.groups != 1:
            raise ConfigurationError("grouped convolutions cannot be adapted")
        if base.padding_mode != "zeros":
            raise ConfigurationError("only zero-padded convolutions can be adapted")
        self.fan_out = base.out_channels
        self.fan_in = base.in_channels * base.kernel_size[0]
        super().__init__(base, rank, context)
        a = torch.empty(rank, base.in_channels, base.kernel_size[0])
        nn.init.kaiming_uniform_(a, a=math.sqrt(5))
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_channels, rank))

    def forward(self, x, s=None):
        s = self._scaling(s)
        b = self.base
        h = F.conv1d(x, self.lora_A, None, b.stride, b.padding, b.dilation)
        h = h * (s[..., :, None] if s.dim() > 1 else s[:, None])
        return b(x) + F.conv1d(h, self.lora_B[:, :, None])


class WMLoRALinear(_WMLoRABase):
    def __init__(self, base: nn.Linear, rank: int, context: ScalingContext | None = None):
        self.fan_out = base.out_features
        self.fan_in = base.in_features
        super().__init__(base, rank, context)
        a = torch.empty(rank, base.in_features)
        nn.init.kaiming_uniform_(a, a=math.sqrt(5))
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x, s=None):
        s = self._scaling(s)
        h = F.linear(x, self.lora_A)
        if s.dim() > 1:
            # per-example scaling: s is (batch, r), broadcast over any middle dims
            s = s.reshape(s.shape[0], *([1] * (h.dim() - 2)), s.shape[-1])
        return self.base(x) + F.linear(h * s, self.lora_B)


def wmlora_forward(x: torch.Tensor, adapter: _WMLoRABase, s: torch.Tensor) -> torch.Tensor:
    return adapter(x, s)


@dataclass
class MergedWeight:
    weight: torch.Tensor
    watermark_id: str


def merge_adapter(adapter: _WMLoRABase, s: torch.Tensor, watermark_id: str = "") -> MergedWeight:
    with torch.no_grad():
        return MergedWeight(adapter.merged_weight(s).detach().clone(), watermark_id)


# --- generator-level injection -------------------------------------------------


def _matches(name: str, module: nn.Module, selector, include_transposed: bool) -> bool:
    if type(module) is nn.ConvTranspose1d:
        if not include_transposed:
            return False
        raise ConfigurationError("transposed convolutions are not supported by WM-LoRA here")
    if type(module) is not nn.Conv1d:
        return False
    if selector in (None, "all", "conv1d"):
        return True
    if callable(selector):
        return bool(selector(name, module))
    return re.search(selector, name) is not None


class AdaptedGenerator(nn.Module):
    """A pretrained generator whose selected convs are WM-LoRA layers sharing one scaling vector."""

    def __init__(self, generator: nn.Module, rank: int, adapters: dict, context: ScalingContext):
        super().__init__()
        self.generator = generator
        self.rank = rank
        self.context = context
        self.adapter_names = list(adapters)

    def adapters(self):
        mods = dict(self.generator.named_modules())
        return {name: mods[name] for name in self.adapter_names}

    def lora_named_parameters(self):
        for name, ad in self.adapters().items():
            yield f"{name}.lora_A", ad.lora_A
            yield f"{name}.lora_B", ad.lora_B

    def lora_parameters(self):
        return [p for _, p in self.lora_named_parameters()]

    def forward(self, features, s):
        self.context.value = s
        try:
            return self.generator(features)
        finally:
            self.context.value = None

    def base_state_dict(self):
        """State dict of the underlying pretrained architecture (frozen W0 and biases)."""
        out = {}
        for k, v in self.generator.state_dict().items():
            if ".lora_" in k:
                continue
            out[k.replace(".base.", ".")] = v
        return out

    def merged_state_dict(self, s: torch.Tensor) -> dict:
        """Plain-architecture state dict with every adapter merged under scaling vector s."""
        out = self.base_state_dict()
        with torch.no_grad():
            for name, ad in self.adapters().items():
                out[f"{name}.weight"] = ad.merged_weight(s).detach().clone()
        return out

    def merged_generator(self, s: torch.Tensor, template: nn.Module) -> nn.Module:
        plain = copy.deepcopy(template)
        plain.load_state_dict(self.merged_state_dict(s))
        return plain


def _set_submodule(root: nn.Module, name: str, module: nn.Module):
    parent_name, _, child = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child, module)


def inject_adapters(
    generator: nn.Module,
    rank: int,
    layer_selector=None,
    include_transposed: bool = False,
) -> AdaptedGenerator:
    """Wrap selected Conv1d layers of a (deep-copied) generator and freeze everything else.

    ``layer_selector`` is None/"all"/"conv1d" for every plain Conv1d, a regex
    searched in the module name, or a callable (name, module) -> bool.
    """
    generator = copy.deepcopy(generator)
    for p in generator.parameters():
        p.requires_grad_(False)
    names = [
        name
        for name, mod in generator.named_modules()
        if _matches(name, mod, layer_selector, include_transposed)
    ]
    if not names:
        raise ConfigurationError(f"layer selector {layer_selector!r} matched no Conv1d layers")
    context = ScalingContext()
    adapters = {}
    for name in names:
        ad = WMLoRAConv1d(generator.get_submodule(name), rank, context)
        _set_submodule(generator, name, ad)
        adapters[name] = ad
    return AdaptedGenerator(generator, rank, adapters, context)


def count_conv1d(module: nn.Module) -> int:
    return sum(1 for m in module.modules() if type(m) is nn.Conv1d)


@torch.no_grad()
def verify_merge_equivalence(adapted_gen, merged_gen, probes, s=None) -> float:
    """Max |adapted(x, s) - merged(x)| over probes; adapted_gen may be an
    AdaptedGenerator (then ``s`` is required) or any callable taking one input."""
    if isinstance(adapted_gen, AdaptedGenerator) and isinstance(merged_gen, nn.Module):
        expected = {k: tuple(v.shape) for k, v in adapted_gen.base_state_dict().items()}
        got = {k: tuple(v.shape) for k, v in merged_gen.state_dict().items()}
        if expected != got:
            raise StructuralError("merged model does not share the adapted model's architecture")
    worst = 0.0
    for x in probes:
        a = adapted_gen(x, s) if isinstance(adapted_gen, AdaptedGenerator) else adapted_gen(x)
        m = merged_gen(x)
        if a.shape != m.shape:
            raise StructuralError(f"output shapes differ: {tuple(a.shape)} vs {tuple(m.shape)}")
        worst = max(worst, float((a - m).abs().max()))
    return worst
