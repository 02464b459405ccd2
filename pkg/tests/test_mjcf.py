import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codesign.errors import MorphologyError
from codesign.mjcf import export_mjcf, parse_mjcf
from codesign.morphology import RandomAgentConfig, build_graph, random_agent


def counts(text):
    root = ET.fromstring(text)
    return len(root.findall(".//geom")), len(root.findall(".//joint[@type='hinge']"))


def test_single_capsule_document():
    agent = build_graph("parts:\n  - {id: a, part_class: B, length: 0.4, radius: 0.1, density: 5.0}\n")
    assert counts(export_mjcf(agent)) == (1, 0)


def test_eight_part_walker_document(walker8):
    text = export_mjcf(walker8)
    assert counts(text) == (8, 7)
    root = ET.fromstring(text)
    assert len(root.find("actuator")) == 7
    for act in root.find("actuator"):
        lo, hi = map(float, act.get("forcerange").split())
        assert (lo, hi) == (-10.0, 10.0)


def test_fromto_endpoints(walker8):
    root = ET.fromstring(export_mjcf(walker8))
    for body in root.iter("body"):
        part = walker8.part(body.get("name"))
        ft = np.array(body.find("geom").get("fromto").split(), dtype=float)
        np.testing.assert_allclose(ft[:3], 0.0)
        np.testing.assert_allclose(ft[3:], np.array(part.init_dir) * part.length, atol=1e-15)
        parent = walker8.parent_joint(part.id)
        if parent is not None:
            host = walker8.part(parent.parent)
            pos = np.array(body.get("pos").split(), dtype=float)
            np.testing.assert_allclose(pos, np.array(host.init_dir) * host.length * part.attach_pos, atol=1e-15)


def test_round_trip_and_idempotence(walker12, walker8, quadruped):
    for agent in (walker12, walker8, quadruped):
        text = export_mjcf(agent)
        # the document lists parts depth-first, so compare against that ordering
        assert parse_mjcf(text) == agent.canonical()
        assert export_mjcf(parse_mjcf(text)) == text


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_random_agents(seed):
    agent = random_agent(RandomAgentConfig(), np.random.default_rng(seed))
    assert parse_mjcf(export_mjcf(agent)) == agent.canonical()


def test_parse_without_custom_block(walker8):
    root = ET.fromstring(export_mjcf(walker8))
    root.remove(root.find("custom"))
    agent = parse_mjcf(ET.tostring(root, encoding="unicode"))
    assert len(agent.parts) == 8
    for p in agent.parts:
        ref = walker8.part(p.id)
        assert p.length == pytest.approx(ref.length, abs=1e-12)
        if p.id != agent.root:
            assert p.attach_pos == pytest.approx(ref.attach_pos, abs=1e-12)


def test_parse_rejects_malformed_documents():
    with pytest.raises(MorphologyError):
        parse_mjcf("<mujoco/>")
    with pytest.raises(MorphologyError):
        parse_mjcf("<mujoco><worldbody><body name='a'/></worldbody></mujoco>")
