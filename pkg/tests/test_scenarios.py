import dataclasses

import numpy as np
import pytest
import yaml

from contact_flow.decoder import decode
from contact_flow.scenarios import (
    HIDDEN_DIFF_FRACTION,
    Scenario,
    ScenarioSeeds,
    SUITE_NAMES,
    SUITE_RUNS_PER_SCENARIO,
    VisibilitySpec,
    ambiguous_pairs,
    build_scenario,
    derive_run_seeds,
    scaled_radius,
    standard_suite,
    suite_scenario,
)
from contact_flow.voxelcore import Box, binarize, point_to_index, surface_mask


def test_suite_is_deterministic_and_byte_identical():
    a = [yaml.safe_dump(s.to_dict(), sort_keys=True) for s in standard_suite(n=4)]
    b = [yaml.safe_dump(s.to_dict(), sort_keys=True) for s in standard_suite(n=4)]
    assert a == b


def test_suite_matches_documented_manifest():
    suite = standard_suite(n=16)
    assert tuple(s.name for s in suite) == SUITE_NAMES
    assert all(s.runs == SUITE_RUNS_PER_SCENARIO == 50 for s in suite)
    assert [len(s.library) for s in suite] == [1, 2, 3, 2]
    assert [s.ambiguous for s in suite] == [False, True, True, True]
    # seed bases are fixed and disjoint between reference and guided streams
    for i, s in enumerate(suite):
        base = 1000 * (i + 1)
        assert s.seeds == ScenarioSeeds(
            reference=500_000 + base, guided=base, contacts=900_000 + base
        )
    assert all(s.contact_count == 10 for s in suite)


@pytest.mark.parametrize("n", [4, 16])
@pytest.mark.parametrize("name", SUITE_NAMES)
def test_every_suite_scenario_builds_and_validates(name, n):
    built = build_scenario(suite_scenario(name, n=n))
    if built.scenario.ambiguous:
        assert built.ambiguous_pairs
    assert not built.ground_truth.is_empty()
    assert len(built.contacts) == built.scenario.contact_count


def test_ambiguous_components_match_exactly_on_visible_region():
    built = build_scenario(suite_scenario("depth_boxes", n=4))
    visible = built.visibility.data
    bins = [
        binarize(decode(built.model.mean_latent(k), built.decoder), 0.5)
        for k in range(built.model.k)
    ]
    for i, j in built.ambiguous_pairs:
        sym = bins[i].data ^ bins[j].data
        assert (sym & visible).sum() == 0
        union = (bins[i].data | bins[j].data).sum()
        assert (sym & ~visible).sum() >= HIDDEN_DIFF_FRACTION * union


def test_conditioning_splits_prior_between_ambiguous_pair():
    sc = suite_scenario("depth_boxes", n=4)
    sc = dataclasses.replace(sc, weights=(0.3, 0.7))
    built = build_scenario(sc)
    ratio = built.model.weights[0] / built.model.weights[1]
    assert ratio == pytest.approx(0.3 / 0.7, rel=1e-9)


def test_three_component_suppression():
    # bracket scenario: all three brackets agree on the visible half,
    # so conditioning keeps the prior
    built = build_scenario(suite_scenario("bracket_orientation", n=4))
    np.testing.assert_allclose(built.model.weights, 1 / 3, atol=1e-9)


def test_single_component_conditioning_is_normalization_noop():
    built = build_scenario(suite_scenario("single_cylinder", n=4))
    np.testing.assert_allclose(built.model.weights, [1.0])


def test_contacts_lie_on_true_hidden_surface():
    built = build_scenario(suite_scenario("aspect_flare", n=4))
    N = built.scenario.resolution
    surf = surface_mask(built.ground_truth)
    hidden = ~built.visibility.data
    for p in built.contacts.points:
        idx = tuple(point_to_index(p, N))
        assert surf[idx]
        assert hidden[idx]


def test_contact_oversampling_fails_the_build():
    sc = suite_scenario("depth_boxes", n=4)
    sc = dataclasses.replace(sc, contact_count=100_000)
    with pytest.raises(ValueError):
        build_scenario(sc)


def test_demanded_ambiguity_failure_raises():
    # two boxes that differ inside the visible half cannot be ambiguous
    sc = Scenario(
        name="not_ambiguous",
        n=4,
        library=(
            Box((0.125, 0.25, 0.25), (0.5, 0.75, 0.75)),
            Box((0.125, 0.25, 0.25), (0.9375, 0.75, 0.75)),
        ),
        true_index=1,
        visibility=VisibilitySpec(),
        seeds=ScenarioSeeds(1, 2, 3),
        ambiguous=True,
    )
    with pytest.raises(ValueError, match="ambiguity"):
        build_scenario(sc)


def test_scenario_yaml_roundtrip(tmp_path):
    sc = suite_scenario("bracket_orientation", n=16)
    path = tmp_path / "scenario.yaml"
    sc.save(path)
    loaded = Scenario.load(path)
    assert loaded == sc


def test_derive_run_seeds_are_paired_and_disjoint():
    sc = suite_scenario("depth_boxes", n=4)
    s0 = derive_run_seeds(sc, 0)
    s7 = derive_run_seeds(sc, 7)
    assert s7.guided == s0.guided + 7
    assert s7.reference == s0.reference + 7
    assert s7.contacts == s0.contacts + 7
    guided = {derive_run_seeds(sc, i).guided for i in range(50)}
    refs = {derive_run_seeds(sc, i).reference for i in range(50)}
    assert not guided & refs


def test_scaled_radius_matches_defaults():
    assert scaled_radius(64) == 10
    assert scaled_radius(16) == 2
    assert 2 * scaled_radius(8) + 1 <= 8


def test_build_scenario_with_run_index_shifts_seeds():
    sc = suite_scenario("depth_boxes", n=4)
    built = build_scenario(sc, run_index=3)
    assert built.scenario.seeds.guided == sc.seeds.guided + 3


def test_example_scenario_file_parses(tmp_path):
    from pathlib import Path

    example = Path(__file__).resolve().parent.parent / "scenarios" / "example.yaml"
    sc = Scenario.load(example)
    built = build_scenario(sc)
    assert built.scenario.name == sc.name
