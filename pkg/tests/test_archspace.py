"""Architecture-space tests.

The enumerator is checked against an independent brute-force generator that
builds every three-way split of every legal width assignment directly and
filters with the validator, so the two implementations share no loops.
"""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodulenas.archspace import (LEGAL_WIDTHS, ArchSpec, SpaceConstraints,
                                 SpecError, depth_bounds, enumerate_space,
                                 format_spec, parse_spec, validate_spec)


def brute_force_space(widths, min_total, max_total):
    """Independent oracle: loop over all depth triples and width products,
    keeping whatever the validator accepts."""
    found = set()
    for L in range(0, max_total + 1):
        for M in range(0, max_total + 1):
            for N in range(0, max_total + 1):
                if not (min_total <= L + M + N <= max_total):
                    continue
                for ws in itertools.product(sorted(widths), repeat=L + M + N):
                    spec = ArchSpec(tuple(ws[:L]), tuple(ws[L:L + M]),
                                    tuple(ws[L + M:]))
                    try:
                        validate_spec(spec)
                    except SpecError:
                        continue
                    found.add(spec)
    return found


def test_enumeration_matches_brute_force_small():
    cons = SpaceConstraints(widths=(4, 8), min_total=3, max_total=4)
    got = list(enumerate_space(cons))
    assert len(got) == len(set(got)), "duplicates in enumeration"
    assert set(got) == brute_force_space((4, 8), 3, 4)
    assert len(got) == 56  # 8 triples at depth 3 + 48 at depth 4


def test_enumeration_matches_brute_force_medium():
    cons = SpaceConstraints(widths=(4, 8, 16), min_total=3, max_total=5)
    got = list(enumerate_space(cons))
    assert len(got) == len(set(got))
    assert set(got) == brute_force_space((4, 8, 16), 3, 5)
    assert len(got) == 1728


def test_depth_three_is_exactly_one_per_stage():
    # at total depth 3 the balance rule forces (1,1,1)
    cons = SpaceConstraints(widths=(4,), min_total=3, max_total=3)
    got = list(enumerate_space(cons))
    assert got == [ArchSpec((4,), (4,), (4,))]


def test_enumeration_is_deterministic():
    cons = SpaceConstraints(widths=(8, 4), min_total=3, max_total=4)
    assert list(enumerate_space(cons)) == list(enumerate_space(cons))


def test_depth_bounds():
    assert depth_bounds(3) == (1, 2)
    assert depth_bounds(4) == (1, 2)
    assert depth_bounds(5) == (1, 3)
    assert depth_bounds(8) == (2, 4)
    assert depth_bounds(9) == (2, 5)


@pytest.mark.parametrize("text", [
    "[[4],[4],[4]]",
    "[[8,8],[16],[32]]",
    "[[64,64],[128,128],[4,4,4]]",
    " [[4],[8],[16]] ",
])
def test_parse_roundtrip(text):
    spec = parse_spec(text)
    assert parse_spec(format_spec(spec)) == spec


@pytest.mark.parametrize("text", [
    "[[4],[4]]",              # two stages
    "[[4],[4],[4],[4]]",      # four stages
    "[[4],[4],[5]]",          # illegal width
    "[[],[],[]]",             # empty: total depth 0
    "[[4,4,4,4],[4],[4]]",    # stage holds more than half of 6 blocks
    "[[4,4,4,4],[4,4,4],[4,4,4]]",  # total depth 10
    "[[4.0],[4],[4]]",        # non-integer width
    "[[True],[4],[4]]",       # bool is not a width
    "((4,),(4,),(4,))",       # tuples, not lists
    "not a list",
    "[[4],[4],[4]",           # unbalanced bracket
])
def test_parse_rejects(text):
    with pytest.raises(SpecError):
        parse_spec(text)


def test_constraints_validation():
    with pytest.raises(SpecError):
        SpaceConstraints(widths=(4, 7))
    with pytest.raises(SpecError):
        SpaceConstraints(min_total=2)
    with pytest.raises(SpecError):
        SpaceConstraints(min_total=5, max_total=4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(LEGAL_WIDTHS), min_size=0, max_size=5),
       st.lists(st.sampled_from(LEGAL_WIDTHS), min_size=0, max_size=5),
       st.lists(st.sampled_from(LEGAL_WIDTHS), min_size=0, max_size=5))
def test_validator_agrees_with_rules(s3, s4, s5):
    spec = ArchSpec(tuple(s3), tuple(s4), tuple(s5))
    total = spec.total_depth
    lo, hi = depth_bounds(total)
    legal = (3 <= total <= 9
             and all(lo <= len(s) <= hi for s in spec.stages))
    if legal:
        assert validate_spec(spec) is spec
    else:
        with pytest.raises(SpecError):
            validate_spec(spec)


def test_spec_ordering_is_total():
    specs = list(enumerate_space(SpaceConstraints(widths=(4, 8),
                                                  min_total=3, max_total=3)))
    assert sorted(specs) == sorted(specs, key=lambda s: s.stages)
