"""Deterministic structural causal models and the intervention calculus on them.

A model is a DAG of named variables. Each non-input variable has a pure
structural equation over its ordered parents. Settings are plain dicts from
variable name to value.
"""
from __future__ import annotations

import inspect
import itertools
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

from iit.errors import (
    ArityError,
    CycleError,
    DomainError,
    MissingInput,
    NonEnumerableInputs,
    TypeMismatch,
    UnknownVariable,
)

Setting = dict
# value-space flag for domains that cannot be enumerated (images, worlds, ...)
OPAQUE = None


class CausalModel:
    """A validated, immutable structural causal model.

    Use :func:`build_model` to construct one. Interventions return cheap
    wrappers that share structure with the original model.
    """

    __slots__ = (
        "variables", "parents", "value_spaces", "equations", "order",
        "inputs", "outputs", "_fixed", "_domains", "_children",
    )

    def __init__(self, variables, parents, value_spaces, equations, order,
                 fixed=None):
        self.variables: tuple[str, ...] = variables
        self.parents: Mapping[str, tuple[str, ...]] = parents
        self.value_spaces: Mapping[str, tuple | None] = value_spaces
        self.equations: Mapping[str, Callable] = equations
        self.order: tuple[str, ...] = order
        self._fixed: dict[str, Any] = fixed or {}
        self._children = {v: tuple(c for c in variables if v in parents[c])
                          for v in variables}
        self.inputs = tuple(v for v in variables if not parents[v])
        self.outputs = tuple(v for v in variables if not self._children[v])
        self._domains = {v: frozenset(s) for v, s in value_spaces.items()
                         if s is not OPAQUE}

    @property
    def fixed(self) -> Mapping[str, Any]:
        return dict(self._fixed)

    @property
    def intermediates(self) -> tuple[str, ...]:
        return tuple(v for v in self.variables
                     if v not in self.inputs and v not in self.outputs)

    def children(self, var: str) -> tuple[str, ...]:
        return self._children[var]

    def _check_vars(self, names: Iterable[str]) -> None:
        for v in names:
            if v not in self.parents:
                raise UnknownVariable(v)

    def _needed(self, targets: Iterable[str]) -> set[str]:
        seen: set[str] = set()
        stack = list(targets)
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            if v not in self._fixed:
                stack.extend(self.parents[v])
        return seen

    def _evaluate(self, assign: Mapping[str, Any], targets: Iterable[str],
                  extra_fixed: Mapping[str, Any] | None = None) -> dict:
        fixed = self._fixed if not extra_fixed else {**self._fixed, **extra_fixed}
        needed = set()
        stack = list(targets)
        while stack:
            v = stack.pop()
            if v in needed:
                continue
            needed.add(v)
            if v not in fixed:
                stack.extend(self.parents[v])
        vals: dict[str, Any] = {}
        for v in self.order:
            if v not in needed:
                continue
            if v in fixed:
                vals[v] = fixed[v]
            elif not self.parents[v]:
                try:
                    vals[v] = assign[v]
                except KeyError:
                    raise MissingInput(v) from None
            else:
                vals[v] = self.equations[v](*[vals[p] for p in self.parents[v]])
        return vals

    def check_value(self, var: str, value: Any) -> None:
        dom = self._domains.get(var)
        if dom is not None and value not in dom:
            raise DomainError(f"{value!r} not in Val({var})")

    def dump(self) -> str:
        """Debug listing, one line per variable: name, parents, domain."""
        lines = []
        for v in self.order:
            space = self.value_spaces[v]
            dom = "opaque" if space is OPAQUE else "{" + ", ".join(map(repr, space)) + "}"
            fixed = f" := {self._fixed[v]!r}" if v in self._fixed else ""
            lines.append(f"{v}\t[{', '.join(self.parents[v])}]\t{dom}{fixed}")
        return "\n".join(lines)

    def __repr__(self) -> str:
        return f"CausalModel(variables={list(self.variables)}, fixed={self._fixed})"


def _arity(fn: Callable) -> int | None:
    try:
        sig = inspect.signature(fn)
    except (TypeError, ValueError):
        return None
    count = 0
    for p in sig.parameters.values():
        if p.kind is p.VAR_POSITIONAL:
            return None
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty:
            count += 1
    return count


def _topological_order(variables: Sequence[str],
                       parents: Mapping[str, Sequence[str]]) -> tuple[str, ...]:
    # Kahn's algorithm, stable with respect to declaration order
    indeg = {v: len(parents[v]) for v in variables}
    children: dict[str, list[str]] = {v: [] for v in variables}
    for v in variables:
        for p in parents[v]:
            children[p].append(v)
    ready = [v for v in variables if indeg[v] == 0]
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(variables):
        stuck = [v for v in variables if indeg[v] > 0]
        raise CycleError(f"parent relation has a cycle through {stuck}")
    return tuple(order)


def build_model(variables: Sequence[str],
                parents: Mapping[str, Sequence[str]],
                value_spaces: Mapping[str, Iterable | None],
                equations: Mapping[str, Callable]) -> CausalModel:
    """Validate a model description and return a :class:`CausalModel`.

    ``value_spaces[v]`` is either an iterable of admissible values or
    :data:`OPAQUE`. Equations take the parent values positionally, in the
    order given by ``parents[v]``.
    """
    variables = tuple(variables)
    if len(set(variables)) != len(variables):
        raise ValueError("duplicate variable names")
    known = set(variables)
    for table, label in ((parents, "parents"), (value_spaces, "value_spaces"),
                         (equations, "equations")):
        for k in table:
            if k not in known:
                raise UnknownVariable(f"{k} in {label}")
    pa = {v: tuple(parents.get(v, ())) for v in variables}
    for v, ps in pa.items():
        for p in ps:
            if p not in known:
                raise UnknownVariable(f"{p} (parent of {v})")
    order = _topological_order(variables, pa)

    eqs = {}
    for v in variables:
        if not pa[v]:
            continue
        if v not in equations:
            raise ArityError(f"{v} has parents but no equation")
        n = _arity(equations[v])
        if n is not None and n != len(pa[v]):
            raise ArityError(f"equation for {v} takes {n} arguments, |PA_{v}| = {len(pa[v])}")
        eqs[v] = equations[v]

    spaces = {}
    for v in variables:
        space = value_spaces.get(v, OPAQUE)
        spaces[v] = OPAQUE if space is OPAQUE else tuple(space)
    return CausalModel(variables, pa, spaces, eqs, order)


def get_vals(model: CausalModel, input: Mapping[str, Any], vars: Iterable[str]) -> Setting:
    """Values of ``vars`` when ``model`` processes ``input``."""
    vars = tuple(vars)
    model._check_vars(vars)
    for v in model.inputs:
        if v not in input:
            raise MissingInput(v)
        model.check_value(v, input[v])
    vals = model._evaluate(input, vars)
    return {v: vals[v] for v in vars}


def intervene(model: CausalModel, fixed: Mapping[str, Any]) -> CausalModel:
    """The model with the equations of ``fixed`` replaced by constants."""
    model._check_vars(fixed)
    for v, val in fixed.items():
        model.check_value(v, val)
    merged = {**model._fixed, **fixed}
    return CausalModel(model.variables, model.parents, model.value_spaces,
                       model.equations, model.order, merged)


def interchange(model: CausalModel, base: Mapping[str, Any],
                source: Mapping[str, Any], vars: Iterable[str]) -> Setting:
    """Output of ``model`` on ``base`` with ``vars`` set to their values under ``source``."""
    vars = tuple(vars)
    installed = get_vals(model, source, vars)
    return get_vals(intervene(model, installed), base, model.outputs)


def typed_interchange(model: CausalModel, base: Mapping[str, Any],
                      source: Mapping[str, Any], v_from: str, v_to: str) -> Setting:
    """Install the source value of ``v_from`` at ``v_to``, then run ``base``."""
    model._check_vars((v_from, v_to))
    if model.value_spaces[v_from] != model.value_spaces[v_to]:
        raise TypeMismatch(f"Val({v_from}) != Val({v_to})")
    value = get_vals(model, source, (v_from,))[v_from]
    return get_vals(intervene(model, {v_to: value}), base, model.outputs)


def _cut_ancestors(model: CausalModel, var: str, keep: set[str]) -> list[str]:
    # inputs and kept variables reachable from var without passing through
    # another kept variable
    found = set()
    seen = set()
    stack = list(model.parents[var])
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        if v in keep or not model.parents[v]:
            found.add(v)
            continue
        stack.extend(model.parents[v])
    return [v for v in model.order if v in found]


def marginalize(model: CausalModel, keep: Iterable[str]) -> CausalModel:
    """Compose away every intermediate variable not in ``keep``.

    The result has variables inputs + keep + outputs. Each retained
    non-input variable's equation evaluates the original sub-DAG between its
    new parents and itself.
    """
    keep = set(keep)
    model._check_vars(keep)
    bad = keep - set(model.intermediates)
    if bad:
        raise ValueError(f"only intermediate variables can be kept, got {sorted(bad)}")
    kept_vars = [v for v in model.order
                 if v in keep or v in model.inputs or v in model.outputs]
    parents, equations = {}, {}
    for v in kept_vars:
        if v in model.inputs:
            parents[v] = ()
            continue
        pa = _cut_ancestors(model, v, keep)
        parents[v] = tuple(pa)
        equations[v] = _composed_equation(model, v, tuple(pa), keep)
    spaces = {v: model.value_spaces[v] for v in kept_vars}
    return build_model(kept_vars, parents, spaces, equations)


def _composed_equation(model, var, parent_names, keep):
    fixed_names = [p for p in parent_names if p in keep]

    def equation(*args):
        assign = dict(zip(parent_names, args))
        fixed = {p: assign[p] for p in fixed_names}
        return model._evaluate(assign, (var,), fixed)[var]

    return equation


def enumerate_inputs(model: CausalModel) -> list[Setting]:
    """Every setting of the input variables, in product order."""
    spaces = []
    for v in model.inputs:
        space = model.value_spaces[v]
        if space is OPAQUE:
            raise NonEnumerableInputs(v)
        spaces.append(space)
    return [dict(zip(model.inputs, combo)) for combo in itertools.product(*spaces)]


@dataclass(frozen=True)
class Alignment:
    """Map from high-level variables to low-level locations, plus the output map.

    ``pi`` values are whatever the low-level evaluator understands: a site
    name for networks or a set of variables for symbolic low-level models.
    """

    pi: Mapping[str, Any]
    kappa: Callable[[Any], Any]


def outputs_match(high_out: Mapping[str, Any], mapped: Any) -> bool:
    if isinstance(mapped, Mapping):
        return dict(high_out) == dict(mapped)
    (value,) = high_out.values()
    return value == mapped


def abstraction_check(high: CausalModel, low_evaluator: Callable[[Any, Any, Any], Any],
                      alignment: Alignment, var: str,
                      input_pairs: Iterable[tuple[Setting, Setting]]) -> bool:
    """True iff every aligned interchange on ``var`` agrees under kappa.

    ``low_evaluator(base, source, pi[var])`` returns the raw low-level output
    of the aligned interchange intervention.
    """
    high_star = marginalize(high, {var})
    site = alignment.pi[var]
    for b, s in input_pairs:
        expected = interchange(high_star, b, s, (var,))
        if not outputs_match(expected, alignment.kappa(low_evaluator(b, s, site))):
            return False
    return True
