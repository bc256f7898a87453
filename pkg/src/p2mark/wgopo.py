"""Gradient orthogonal projection between the watermark and generator objectives.

The watermark-loss gradient of the adapter parameters is stored first; the
generator-loss gradient of the same parameters is then projected onto the
half-space where it no longer opposes the stored one, and only then handed to
the optimizer. Everything works on one flattened vector over all trainable
generator parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import LayoutError, SequencingError


@dataclass(frozen=True)
class GradientVector:
    values: torch.Tensor
    layout: tuple  # ((name, shape), ...)

    def __len__(self):
        return self.values.numel()


def layout_of(named_params) -> tuple:
    return tuple((name, tuple(p.shape)) for name, p in named_params)


def flatten_gradients(param_grads, layout) -> GradientVector:
    """Concatenate gradients (mapping name -> tensor) in layout order, row-major."""
    parts = []
    for name, shape in layout:
        g = param_grads.get(name) if hasattr(param_grads, "get") else None
        if g is None:
            raise LayoutError(f"missing gradient for {name}")
        if tuple(g.shape) != tuple(shape):
            raise LayoutError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(shape)}")
        parts.append(g.reshape(-1))
    values = torch.cat(parts) if parts else torch.zeros(0)
    return GradientVector(values, tuple((n, tuple(s)) for n, s in layout))


def unflatten_gradients(vec: GradientVector) -> dict:
    out = {}
    offset = 0
    for name, shape in vec.layout:
        n = 1
        for d in shape:
            n *= d
        out[name] = vec.values[offset : offset + n].reshape(shape)
        offset += n
    if offset != vec.values.numel():
        raise LayoutError("vector length does not match its layout")
    return out


def project(g_gen, g_wm):
    """Project g_gen away from g_wm when they conflict (negative inner product).

    Works on GradientVector or plain 1-D tensors. The no-conflict branch
    returns the input object unchanged. The conflict branch is evaluated in
    float64 and cast back to the input dtype.
    """
    if isinstance(g_gen, GradientVector) or isinstance(g_wm, GradientVector):
        if not (isinstance(g_gen, GradientVector) and isinstance(g_wm, GradientVector)):
            raise LayoutError("cannot mix GradientVector and raw tensors")
        if g_gen.layout != g_wm.layout:
            raise LayoutError("gradient layouts differ")
        projected = project(g_gen.values, g_wm.values)
        if projected is g_gen.values:
            return g_gen
        return GradientVector(projected, g_gen.layout)

    if g_gen.shape != g_wm.shape:
        raise LayoutError(f"gradient shapes differ: {tuple(g_gen.shape)} vs {tuple(g_wm.shape)}")
    a = g_gen.double()
    b = g_wm.double()
    dot = torch.dot(a, b)
    if dot >= 0:
        return g_gen
    return (a - (dot / torch.dot(b, b)) * b).to(g_gen.dtype)


class WGOPO:
    """Per-batch store of the watermark gradient for a fixed set of parameters."""

    def __init__(self, named_params, enabled: bool = True):
        self.named_params = list(named_params)
        self.layout = layout_of(self.named_params)
        self.enabled = enabled
        self.stored = None
        self.fired = 0
        self.steps = 0

    def _current(self) -> GradientVector:
        grads = {}
        for name, p in self.named_params:
            grads[name] = p.grad if p.grad is not None else torch.zeros_like(p)
        return flatten_gradients(grads, self.layout)

    def capture(self):
        """Store the current .grad of the parameters as the watermark gradient."""
        self.stored = GradientVector(self._current().values.detach().clone(), self.layout)

    def project_pending(self) -> bool:
        """Replace pending .grad with its projection; returns whether the projection fired."""
        if self.stored is None:
            raise SequencingError("generator step attempted without a stored watermark gradient")
        g_wm, self.stored = self.stored, None
        self.steps += 1
        if not self.enabled:
            return False
        g_gen = self._current()
        g_new = project(g_gen, g_wm)
        if g_new is g_gen:
            return False
        self.fired += 1
        for (name, p), g in zip(self.named_params, unflatten_gradients(g_new).values()):
            p.grad = g.clone()
        return True


def wgopo_generator_step(store: WGOPO, loss: torch.Tensor, optimizer) -> bool:
    """Backpropagate the generator loss, project, and step the optimizer."""
    if store.stored is None:
        raise SequencingError("generator step attempted without a stored watermark gradient")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    fired = store.project_pending()
    optimizer.step()
    return fired
