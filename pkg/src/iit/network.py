"""Networks viewed as low-level causal models.

A network exposes named layers and named *sites*: contiguous column ranges
of a layer that high-level variables are aligned with. Interchange
interventions run the source batch, slice the site activation and overwrite
it in the base run on the same tape, so gradients reach both passes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from iit import autodiff as ad
from iit.autodiff import Tape, ValueRef
from iit.errors import ShapeError, TypeMismatch, UnknownSite
from iit.scm import OPAQUE, Alignment, CausalModel, build_model


@dataclass(frozen=True)
class Site:
    layer: str
    lo: int
    hi: int

    @property
    def width(self) -> int:
        return self.hi - self.lo


# layer name -> list of (lo, hi, replacement)
Patch = Mapping[str, Sequence[tuple[int, int, ValueRef]]]


def as_batch(inputs) -> list:
    return [inputs] if isinstance(inputs, Mapping) else list(inputs)


class Network:
    """Base class: parameters, layer widths and named sites.

    Subclasses implement :meth:`encode` (settings -> network input batch) and
    :meth:`run`, calling :meth:`tap` on every layer that may be intervened on.
    """

    def __init__(self, params: Mapping[str, np.ndarray], layers: Mapping[str, int],
                 sites: Mapping[str, Site]):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.layers = dict(layers)
        self.sites = dict(sites)
        for name, site in self.sites.items():
            if site.layer not in self.layers:
                raise UnknownSite(f"{name}: no layer {site.layer!r}")
            if not 0 <= site.lo < site.hi <= self.layers[site.layer]:
                raise ShapeError(f"site {name} [{site.lo}, {site.hi}) outside "
                                 f"{site.layer} of width {self.layers[site.layer]}")

    def site(self, name: str) -> Site:
        try:
            return self.sites[name]
        except KeyError:
            raise UnknownSite(name) from None

    def bind(self, tape: Tape) -> dict[str, ValueRef]:
        return {k: tape.param(k, v) for k, v in self.params.items()}

    @staticmethod
    def tap(acts: dict, patch: Patch | None, name: str, value: ValueRef) -> ValueRef:
        if patch and name in patch:
            for lo, hi, repl in patch[name]:
                value = ad.overwrite(value, repl, lo, hi)
        acts[name] = value
        return value

    def encode(self, settings: Sequence[Mapping]) -> Any:
        raise NotImplementedError

    def select(self, batch: Any, rows: Sequence[int]) -> Any:
        """Rows of an encoded batch."""
        return np.asarray(batch)[np.asarray(rows, dtype=np.intp)]

    def run(self, tape: Tape, batch: Any, patch: Patch | None = None,
            targets: Any = None, reuse: Mapping[str, ValueRef] | None = None,
            stop_at: str | None = None) -> tuple[Any, dict[str, ValueRef]]:
        """Record a forward pass; returns ``(output, activations by layer)``.

        ``reuse`` holds unpatched activations of this same batch already on
        the tape; computation resumes at the earliest patched layer found
        there. ``batch`` must still be given when resuming, since later
        layers may read it again. ``stop_at`` ends the pass after that layer (output is None).
        """
        raise NotImplementedError

    def layer_order(self) -> list[str]:
        return list(self.layers)

    def copy(self) -> "Network":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


class LayeredNetwork(Network):
    """Feed-forward stack: ``input`` layer followed by named stages.

    Each stage is ``(name, width, fn)`` with ``fn(params, prev) -> ValueRef``.
    """

    def __init__(self, params, input_width: int,
                 stages: Sequence[tuple[str, int, Callable]],
                 sites: Mapping[str, Site], encoder: Callable[[Sequence[Mapping]], np.ndarray]):
        layers = {"input": input_width, **{name: w for name, w, _ in stages}}
        super().__init__(params, layers, sites)
        self.stages = list(stages)
        self.encoder = encoder

    def encode(self, settings):
        return np.asarray(self.encoder(as_batch(settings)), dtype=np.float64)

    def run(self, tape, batch, patch=None, targets=None, reuse=None, stop_at=None):
        p = self.bind(tape)
        acts: dict[str, ValueRef] = {}
        names = ["input"] + [name for name, _, _ in self.stages]
        start = 0
        if reuse:
            # resume from the earliest patched layer using cached activations
            first = min((names.index(n) for n in (patch or {})), default=len(names) - 1)
            if names[first] in reuse:
                start = first
        if start == 0:
            h = tape.const(batch)
        else:
            h = reuse[names[start]]
        h = self.tap(acts, patch, names[start], h)
        if stop_at == names[start]:
            return None, acts
        for name, _, fn in self.stages[start:]:
            h = fn(p, h)
            h = self.tap(acts, patch, name, h)
            if stop_at == name:
                return None, acts
        return h, acts


# -- operations ---------------------------------------------------------------

def _tape(tape: Tape | None) -> Tape:
    return Tape(grad=False) if tape is None else tape


def forward(net: Network, inputs, tape: Tape | None = None, targets=None):
    """Plain forward pass; returns the network output (logits)."""
    tape = _tape(tape)
    out, _ = net.run(tape, net.encode(as_batch(inputs)), targets=targets)
    return out


def neural_get_vals(net: Network, inputs, site: str, tape: Tape | None = None) -> ValueRef:
    """Activation slice at ``site`` while the network processes ``inputs``."""
    s = net.site(site)
    tape = _tape(tape)
    _, acts = net.run(tape, net.encode(as_batch(inputs)))
    return ad.slice_cols(acts[s.layer], s.lo, s.hi)


def intervened_run(net: Network, bases, interventions: Sequence[tuple[Any, str, str]],
                   tape: Tape | None = None, targets=None):
    """Run ``bases`` with several site overwrites.

    ``interventions`` is a list of ``(sources, site_from, site_to)``: the
    activation of ``site_from`` under ``sources`` is installed at
    ``site_to``. A source batch shared by several interventions runs once.
    """
    tape = _tape(tape)
    cache: dict[int, dict] = {}
    patch: dict[str, list] = {}
    for sources, site_from, site_to in interventions:
        sf, st = net.site(site_from), net.site(site_to)
        if sf.width != st.width:
            raise TypeMismatch(f"{site_from} has width {sf.width}, {site_to} has {st.width}")
        key = id(sources)
        if key not in cache:
            _, cache[key] = net.run(tape, net.encode(as_batch(sources)))
        repl = ad.slice_cols(cache[key][sf.layer], sf.lo, sf.hi)
        patch.setdefault(st.layer, []).append((st.lo, st.hi, repl))
    out, _ = net.run(tape, net.encode(as_batch(bases)), patch, targets=targets)
    return out


def neural_interchange(net: Network, bases, sources, site: str,
                       tape: Tape | None = None, targets=None):
    """Output on ``bases`` with ``site`` set to its value under ``sources``."""
    return intervened_run(net, bases, [(sources, site, site)], tape, targets)


def neural_typed_interchange(net: Network, bases, sources, site_from: str, site_to: str,
                             tape: Tape | None = None, targets=None):
    """Output on ``bases`` with ``site_to`` set to ``site_from``'s value under ``sources``."""
    return intervened_run(net, bases, [(sources, site_from, site_to)], tape, targets)


@dataclass
class NeuralEvaluator:
    """Adapter exposing a network as ``low_evaluator(base, source, site)``."""

    net: Network
    raw: Callable[[Any], Any] = field(default=lambda out: out)

    def __call__(self, base, source, site):
        out = neural_interchange(self.net, [base], [source], site)
        return self.raw(out)


def validate_alignment(net: Network, alignment: Alignment) -> None:
    """Aligned sites must exist and must not overlap."""
    spans = []
    for var, name in alignment.pi.items():
        s = net.site(name)
        for other_var, other in spans:
            if other.layer == s.layer and other.lo < s.hi and s.lo < other.hi:
                raise ValueError(f"sites of {var} and {other_var} overlap")
        spans.append((var, s))


def as_causal_model(net: LayeredNetwork, input_vars: Sequence[str]) -> CausalModel:
    """Wrap a layered network as an SCM over its sites.

    Each layer is split into its sites plus gap segments; every segment is a
    variable whose parents are all segments of the previous layer. Input
    variables are the high-level input names, encoded by the network's
    encoder. Values are tuples of floats; the output variable is ``output``.
    """
    input_vars = tuple(input_vars)
    names = ["input"] + [n for n, _, _ in net.stages]
    segments: dict[str, list[tuple[str, int, int]]] = {}
    for layer in names[1:]:
        width = net.layers[layer]
        own = sorted((s.lo, s.hi, n) for n, s in net.sites.items() if s.layer == layer)
        segs, pos = [], 0
        for lo, hi, n in own:
            if lo > pos:
                segs.append((f"{layer}[{pos}:{lo}]", pos, lo))
            segs.append((n, lo, hi))
            pos = hi
        if pos < width:
            segs.append((f"{layer}[{pos}:{width}]" if segs else layer, pos, width))
        segments[layer] = segs
    last = names[-1]
    if len(segments[last]) != 1:
        raise ValueError("sites on the output layer are not supported")
    segments[last] = [("output", 0, net.layers[last])]

    variables = list(input_vars)
    parents: dict[str, tuple] = {v: () for v in input_vars}
    equations: dict[str, Callable] = {}
    prev_vars: tuple = input_vars
    for k, (layer, width, fn) in enumerate(net.stages):
        seg_names = tuple(s[0] for s in segments[layer])
        for seg, lo, hi in segments[layer]:
            variables.append(seg)
            parents[seg] = prev_vars
            equations[seg] = _segment_equation(net, k, prev_vars, input_vars, lo, hi)
        prev_vars = seg_names
    spaces = {v: OPAQUE for v in variables}
    return build_model(variables, parents, spaces, equations)


def _segment_equation(net, stage_index, parent_names, input_vars, lo, hi):
    fn = net.stages[stage_index][2]

    def equation(*args):
        tape = Tape(grad=False)
        if stage_index == 0:
            prev = tape.const(net.encode([dict(zip(input_vars, args))]))
        else:
            prev = tape.const(np.concatenate([np.asarray(a, dtype=np.float64) for a in args])[None, :])
        out = fn(net.bind(tape), prev).value[0, lo:hi]
        return tuple(float(x) for x in out)

    return equation
