import itertools

import pytest
from hypothesis import given, strategies as st

from iit.errors import (ArityError, CycleError, MissingInput, NonEnumerableInputs,
                        TypeMismatch, UnknownVariable, DomainError)
from iit.scm import (Alignment, abstraction_check, build_model, enumerate_inputs, get_vals,
                     interchange, intervene, marginalize, typed_interchange)
from iit.tasks.pvr import LABELS, pvr_output

from conftest import bits, digits

T, F = True, False
INPUTS = [bits(a, b) for a in (F, T) for b in (F, T)]


def test_build_conjunction_roles(conj):
    assert conj.inputs == ("B1", "B2")
    assert conj.outputs == ("O",)
    assert set(conj.intermediates) == {"V1", "V2"}


def test_single_variable_model():
    m = build_model(["X"], {}, {"X": (0, 1)}, {})
    assert m.inputs == m.outputs == ("X",)
    assert get_vals(m, {"X": 1}, ["X"]) == {"X": 1}


def test_cycle_rejected():
    with pytest.raises(CycleError):
        build_model(["A", "B"], {"A": ["B"], "B": ["A"]}, {},
                    {"A": lambda b: b, "B": lambda a: a})


def test_arity_checked():
    with pytest.raises(ArityError):
        build_model(["A", "B"], {"B": ["A"]}, {}, {"B": lambda a, extra: a})


def test_get_vals_fig1_annotation(conj):
    assert get_vals(conj, bits(T, F), ["O"]) == {"O": False}


def test_get_vals_inputs_identity(conj):
    for x in INPUTS:
        assert get_vals(conj, x, conj.inputs) == x


def test_get_vals_errors(conj):
    with pytest.raises(MissingInput):
        get_vals(conj, {"B1": True}, ["O"])
    with pytest.raises(UnknownVariable):
        get_vals(conj, bits(T, T), ["Z"])
    with pytest.raises(DomainError):
        get_vals(conj, {"B1": 3, "B2": True}, ["O"])


def test_pvr_get_vals(pvr):
    assert get_vals(pvr, digits(5, 2, 7, 3), ["O"]) == {"O": 7}


def test_intervene_fig1(conj):
    m = intervene(conj, {"V2": True})
    assert get_vals(m, bits(T, F), ["O"]) == {"O": True}
    # original untouched
    assert get_vals(conj, bits(T, F), ["O"]) == {"O": False}


def test_intervene_empty_and_output(conj):
    same = intervene(conj, {})
    clamped = intervene(conj, {"O": True})
    for x in INPUTS:
        assert get_vals(same, x, ["O"]) == get_vals(conj, x, ["O"])
        assert get_vals(clamped, x, ["O"]) == {"O": True}
    with pytest.raises(UnknownVariable):
        intervene(conj, {"Q": 1})


def test_interchange_examples(conj):
    assert interchange(conj, bits(T, F), bits(F, T), ["V2"]) == {"O": True}
    assert interchange(conj, bits(F, F), bits(T, T), ["V1"]) == {"O": False}


def test_typed_interchange_examples(pvr):
    assert typed_interchange(pvr, digits(5, 2, 7, 3), digits(1, 9, 9, 9), "Y_TR", "Y_BL") == {"O": 9}
    assert typed_interchange(pvr, digits(5, 2, 7, 3), digits(5, 2, 7, 3), "Y_BR", "Y_BL") == {"O": 3}


def test_typed_reduces_to_interchange(conj):
    for b, s in itertools.product(INPUTS, INPUTS):
        assert typed_interchange(conj, b, s, "V2", "V2") == interchange(conj, b, s, ["V2"])


def test_typed_mismatch():
    m = build_model(["A", "B", "C", "O"], {"B": ["A"], "C": ["A"], "O": ["B", "C"]},
                    {"A": (0, 1), "B": (0, 1), "C": (0, 1, 2), "O": (0, 1, 2, 3)},
                    {"B": lambda a: a, "C": lambda a: 2 * a, "O": lambda b, c: b + c})
    with pytest.raises(TypeMismatch):
        typed_interchange(m, {"A": 0}, {"A": 1}, "B", "C")


def test_marginalize_pvr_structure(pvr):
    m = marginalize(pvr, {"Y_TL"})
    assert set(m.parents["O"]) == {"Y_TL", "I_TR", "I_BL", "I_BR"}
    assert set(m.variables) == {"I_TL", "I_TR", "I_BL", "I_BR", "Y_TL", "O"}


def test_marginalize_all_intermediates_is_same(conj):
    m = marginalize(conj, {"V1", "V2"})
    for b, s in itertools.product(INPUTS, INPUTS):
        for v in ("V1", "V2"):
            assert interchange(m, b, s, [v]) == interchange(conj, b, s, [v])


def test_marginalize_commutes_with_interchange(conj):
    m = marginalize(conj, {"V1"})
    assert "V2" not in m.variables
    for b, s in itertools.product(INPUTS, INPUTS):
        assert interchange(m, b, s, ["V1"]) == interchange(conj, b, s, ["V1"])


def test_marginalize_rejects_non_intermediates(conj):
    with pytest.raises(ValueError):
        marginalize(conj, {"B1"})
    with pytest.raises(UnknownVariable):
        marginalize(conj, {"nope"})


def test_enumerate_inputs(conj, pvr):
    assert len(enumerate_inputs(conj)) == 4
    with pytest.raises(NonEnumerableInputs):
        enumerate_inputs(pvr)


def test_order_sensitivity(conj):
    b, s = bits(T, F), bits(F, T)
    assert interchange(conj, b, s, ["V2"]) != interchange(conj, s, b, ["V2"])


def test_self_abstraction(conj):
    """A low-level model that literally runs the high-level equations abstracts it."""
    def low(base, source, var):
        return interchange(conj, base, source, [var])["O"]

    pairs = list(itertools.product(INPUTS, INPUTS))
    align = Alignment({"V1": "V1", "V2": "V2"}, lambda y: y)
    assert abstraction_check(conj, low, align, "V1", pairs)
    assert abstraction_check(conj, low, align, "V2", pairs)


def test_dump_mentions_every_variable(conj):
    text = conj.dump()
    for v in conj.variables:
        assert v in text


label = st.integers(0, 9)
tuples = st.tuples(label, label, label, label)


@given(tuples)
def test_determinism(ls):
    from iit.tasks.pvr import pvr_model
    m = pvr_model()
    assert get_vals(m, digits(*ls), m.variables) == get_vals(m, digits(*ls), m.variables)


@given(tuples, st.sampled_from(LABELS), label)
def test_intervention_screening(ls, var, value):
    from iit.tasks.pvr import pvr_model
    m = intervene(pvr_model(), {var: value})
    assert get_vals(m, digits(*ls), [var]) == {var: value}


@given(tuples, st.sets(st.sampled_from(LABELS)))
def test_self_interchange_identity(ls, vars):
    from iit.tasks.pvr import pvr_model
    m = pvr_model()
    b = digits(*ls)
    assert interchange(m, b, b, vars) == get_vals(m, b, m.outputs)


@given(tuples, tuples, st.sampled_from(LABELS))
def test_typed_reduction_property(b, s, var):
    from iit.tasks.pvr import pvr_model
    m = pvr_model()
    assert typed_interchange(m, digits(*b), digits(*s), var, var) == \
        interchange(m, digits(*b), digits(*s), [var])


@given(tuples, tuples, st.sampled_from(LABELS))
def test_marginalization_soundness_pvr(b, s, var):
    from iit.tasks.pvr import pvr_model
    m = pvr_model()
    star = marginalize(m, {var})
    assert interchange(star, digits(*b), digits(*s), [var]) == \
        interchange(m, digits(*b), digits(*s), [var])


@given(tuples, tuples, st.sampled_from(LABELS), st.sampled_from(LABELS))
def test_pvr_typed_closure(b, s, v_from, v_to):
    from iit.tasks.pvr import pvr_model
    m = pvr_model()
    expected = list(b)
    expected[LABELS.index(v_to)] = s[LABELS.index(v_from)]
    assert typed_interchange(m, digits(*b), digits(*s), v_from, v_to) == {"O": pvr_output(*expected)}
