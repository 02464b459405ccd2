"""MJCF-subset export and import.

Only what the agents need: nested bodies with one capsule geom each, hinge
joints, position actuators carrying the PD gains and torque limit, and a
``<custom>`` block holding the values that MJCF would otherwise only imply
(attach fraction, exact length and direction, part class). With that block
present, parse(export(agent)) reproduces the agent bit for bit.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .errors import MorphologyError
from .morphology import AgentGraph, BodyPart, Joint, normalized


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split()]


def export_mjcf(agent: AgentGraph, model_name: str = "agent") -> str:
    root = ET.Element("mujoco", model=model_name)
    ET.SubElement(root, "compiler", angle="radian")
    world = ET.SubElement(root, "worldbody")
    actuators = ET.Element("actuator")
    custom = ET.Element("custom")

    def add_body(parent_el, part: BodyPart, joint: Joint | None, pos):
        body = ET.SubElement(parent_el, "body", name=part.id, pos=_fmt(pos))
        if joint is None:
            ET.SubElement(body, "freejoint", name="root")
        else:
            ET.SubElement(body, "joint", name=joint.id, type="hinge", pos="0 0 0",
                          axis=_fmt(joint.axis), range=_fmt(joint.range), limited="true")
            actuators.append(ET.Element(
                "position", name=f"{joint.id}_act", joint=joint.id,
                kp=repr(float(joint.stiffness)), kv=repr(float(joint.damping)),
                forcelimited="true", forcerange=_fmt((-joint.max_effort, joint.max_effort))))
        end = np.array(part.init_dir) * part.length
        geom = ET.SubElement(body, "geom", name=f"{part.id}_geom", type="capsule",
                             fromto=_fmt((0.0, 0.0, 0.0, *end)), size=repr(float(part.radius)),
                             density=repr(float(part.density)))
        if joint is not None:
            geom.set("friction", _fmt((joint.friction, 0.005, 0.0001)))
        custom.append(ET.Element("numeric", name=f"part:{part.id}",
                                 data=_fmt((part.attach_pos, part.length, *part.init_dir))))
        custom.append(ET.Element("text", name=f"class:{part.id}", data=part.part_class))
        for cj in agent.child_joints(part.id):
            child = agent.part(cj.child)
            add_body(body, child, cj, np.array(part.init_dir) * part.length * child.attach_pos)

    add_body(world, agent.part(agent.root), None, (0.0, 0.0, 0.0))
    if len(actuators):
        root.append(actuators)
    root.append(custom)
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def parse_mjcf(text: str) -> AgentGraph:
    """Read an MJCF document written by ``export_mjcf`` (or a compatible subset)."""
    root = ET.fromstring(text)
    world = root.find("worldbody")
    if world is None:
        raise MorphologyError("MJCF document has no worldbody")
    bodies = world.findall("body")
    if len(bodies) != 1:
        raise MorphologyError(f"expected exactly one root body, found {len(bodies)}")

    exact: dict[str, list[float]] = {}
    classes: dict[str, str] = {}
    custom = root.find("custom")
    if custom is not None:
        for el in custom.findall("numeric"):
            name = el.get("name", "")
            if name.startswith("part:"):
                exact[name[5:]] = _floats(el.get("data"))
        for el in custom.findall("text"):
            name = el.get("name", "")
            if name.startswith("class:"):
                classes[name[6:]] = el.get("data")
    gains = {}
    act = root.find("actuator")
    if act is not None:
        for el in act:
            lo, hi = _floats(el.get("forcerange", "-1 1"))
            gains[el.get("joint")] = (float(el.get("kp", 0.0)), float(el.get("kv", 0.0)), hi)

    parts: list[BodyPart] = []
    joints: list[Joint] = []

    def visit(el, parent: BodyPart | None):
        pid = el.get("name")
        geom = el.find("geom")
        if geom is None or geom.get("type", "capsule") != "capsule":
            raise MorphologyError(f"body {pid!r} needs one capsule geom")
        ft = np.array(_floats(geom.get("fromto")))
        if pid in exact:
            attach, length, dx, dy, dz = exact[pid]
            direction = (dx, dy, dz)
        else:
            seg = ft[3:] - ft[:3]
            length = float(np.linalg.norm(seg))
            direction = normalized(seg, f"body {pid}")
            attach = 0.0
            if parent is not None:
                pos = np.array(_floats(el.get("pos", "0 0 0")))
                attach = float(np.clip(np.linalg.norm(pos) / parent.length, 0.0, 1.0))
        part_class = classes.get(pid, "B" if parent is None else "LL0")
        part = BodyPart(pid, part_class, length, float(geom.get("size").split()[0]),
                        float(geom.get("density", 1000.0)), attach, direction)
        parts.append(part)
        jel = el.find("joint")
        if parent is not None:
            if jel is None or jel.get("type", "hinge") != "hinge":
                raise MorphologyError(f"body {pid!r} needs a hinge joint")
            kp, kv, effort = gains.get(jel.get("name"), (0.0, 0.0, 1.0))
            friction = float(geom.get("friction", "1 0.005 0.0001").split()[0])
            joints.append(Joint(parent.id, pid, tuple(_floats(jel.get("axis"))),
                                tuple(_floats(jel.get("range"))), kp, kv, effort, friction))
        for child in el.findall("body"):
            visit(child, part)

    visit(bodies[0], None)
    return AgentGraph(tuple(parts), tuple(joints), parts[0].id)
