from __future__ import annotations

from functools import cached_property
from typing import Any, Callable, Hashable, Mapping, Sequence

import numpy as np

from iit.autodiff import ValueRef
from iit.network import Network
from iit.scm import Alignment, CausalModel, get_vals, marginalize

MEMO_LIMIT = 1 << 20


class Task:
    """A causal model, a network template aligned with it, and the glue between them.

    Subclasses set ``causal``, ``net``, ``pi`` (variable -> site name) and
    ``output_var`` and implement :meth:`predict` and :meth:`loss`.
    """

    name = "task"
    causal: CausalModel
    net: Network
    pi: Mapping[str, str]
    output_var: str
    # groups of aligned variables that share a value space (typed interventions)
    typed_groups: Sequence[Sequence[str]] = ()

    @property
    def variables(self) -> list[str]:
        return list(self.pi)

    @property
    def alignment(self) -> Alignment:
        return Alignment(dict(self.pi), lambda out: self.predict(out)[0])

    @cached_property
    def _marginals(self) -> dict:
        return {}

    def marginal(self, var: str) -> CausalModel:
        """The causal model with every intermediate but ``var`` composed away."""
        if var not in self._marginals:
            self._marginals[var] = marginalize(self.causal, {var})
        return self._marginals[var]

    @property
    def typed_pairs(self) -> list[tuple[str, str]]:
        return [(a, b) for group in self.typed_groups for a in group for b in group]

    def key(self, setting: Mapping) -> Hashable:
        """Hashable identity of a setting as far as the causal model can tell."""
        return tuple(sorted(setting.items()))

    def memo(self, key: Hashable, compute: Callable[[], Any]) -> Any:
        """Memoize causal-model evaluations, which are pure."""
        cache = self._memo
        if key not in cache:
            if len(cache) >= MEMO_LIMIT:
                cache.clear()
            cache[key] = compute()
        return cache[key]

    @cached_property
    def _memo(self) -> dict:
        return {}

    def label(self, setting: Mapping) -> Any:
        return self.memo(("label", self.key(setting)), lambda: get_vals(
            self.causal, setting, (self.output_var,))[self.output_var])

    def predict(self, output: Any) -> list:
        """Apply the output map row by row."""
        raise NotImplementedError

    def targets(self, labels: Sequence) -> Any:
        """Teacher-forcing targets for sequence outputs; None otherwise."""
        return None

    def loss(self, output: Any, labels: Sequence, weights=None) -> ValueRef:
        raise NotImplementedError

    def valid_label(self, label: Any) -> bool:
        return label is not None

    def probe_space(self, var: str) -> tuple:
        space = self.causal.value_spaces[var]
        if space is None:
            raise ValueError(f"{var} has no enumerable value space to probe")
        return tuple(space)

    def probe_target(self, var: str, settings: Sequence[Mapping]) -> np.ndarray:
        space = {v: i for i, v in enumerate(self.probe_space(var))}
        return np.array([space[self.value(var, s)] for s in settings])

    def value(self, var: str, setting: Mapping) -> Any:
        return self.memo(("value", var, self.key(setting)),
                         lambda: get_vals(self.causal, setting, (var,))[var])

    def augment(self, base: Mapping, source: Mapping, rng: np.random.Generator) -> dict:
        raise NotImplementedError(f"{self.name} has no input-level augmentation")
