"""Articulated object model: URDF parsing/emission, validation, kinematics.

Conventions: link meshes live in their own link frame; a joint origin is the
child frame position in the parent frame (orientation zero for emitted
assets, rpy folded into the child on ingest). Supported joint types are
fixed, revolute, prismatic, and continuous.
"""

from __future__ import annotations

import io
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (InvalidArgument, InvalidKinematicTree, InvalidLimits,
                     LimitViolation, MeshResolutionError)
from .geometry import TriangleMesh, merge_meshes
from .io_obj import load_obj, save_obj
from .transforms import SimilarityTransform, rotation_about_axis

JOINT_TYPES = ("fixed", "revolute", "prismatic", "continuous")
LIMITED_TYPES = ("revolute", "prismatic")


@dataclass(frozen=True)
class JointSpec:
    origin: np.ndarray  # child frame position in the parent frame
    axis: np.ndarray
    joint_type: str
    lower: Optional[float] = None
    upper: Optional[float] = None
    parent: int = 0

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=np.float64).reshape(3))
        if self.joint_type not in JOINT_TYPES:
            raise InvalidArgument(f"unknown joint type {self.joint_type!r}")

    @property
    def has_limits(self) -> bool:
        return self.lower is not None and self.upper is not None


@dataclass(frozen=True)
class Link:
    name: str
    mesh: TriangleMesh
    joint: Optional[JointSpec] = None  # absent exactly for the base link


@dataclass(frozen=True)
class ArticulatedObject:
    links: tuple

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def k(self) -> int:
        return len(self.links)

    @property
    def base_index(self) -> int:
        bases = [i for i, l in enumerate(self.links) if l.joint is None]
        if len(bases) != 1:
            raise InvalidKinematicTree(f"object must have exactly one base link, found {len(bases)}")
        return bases[0]

    def link_by_name(self, name: str) -> Link:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(name)

    def assembled_mesh(self) -> TriangleMesh:
        """All link meshes merged in the world frame at zero configuration."""
        transforms = forward_kinematics(self, _zero_configuration(self))
        parts = []
        for link, T in zip(self.links, transforms):
            verts = link.mesh.vertices @ T[:3, :3].T + T[:3, 3]
            parts.append(TriangleMesh(verts, link.mesh.triangles))
        return merge_meshes(parts)


# ---------------------------------------------------------------------------


def validate(obj: ArticulatedObject) -> list:
    """Structural diagnostics; empty list iff the object is well formed."""
    diags = []
    names = [l.name for l in obj.links]
    if len(set(names)) != len(names):
        diags.append("DuplicateLinkNames")
    bases = [i for i, l in enumerate(obj.links) if l.joint is None]
    if len(bases) != 1:
        diags.append(f"BaseCount({len(bases)})")
    for i, link in enumerate(obj.links):
        if not link.mesh.n_triangles:
            diags.append(f"EmptyMesh({link.name})")
        j = link.joint
        if j is None:
            continue
        if not (0 <= j.parent < obj.k) or j.parent == i:
            diags.append(f"BadParent({link.name})")
        if j.joint_type != "fixed" and abs(np.linalg.norm(j.axis) - 1.0) > 1e-6:
            diags.append(f"NonUnitAxis({link.name})")
        if j.joint_type in LIMITED_TYPES:
            if not j.has_limits:
                diags.append(f"MissingLimits({link.name})")
            elif j.lower > j.upper:
                diags.append(f"InvalidLimits({link.name})")
        elif j.has_limits:
            diags.append(f"UnexpectedLimits({link.name})")
    # reachability from the base (cycle / forest detection)
    if len(bases) == 1:
        root = bases[0]
        reached = {root}
        frontier = [root]
        children = {i: [] for i in range(obj.k)}
        for i, link in enumerate(obj.links):
            if link.joint is not None and 0 <= link.joint.parent < obj.k:
                children[link.joint.parent].append(i)
        while frontier:
            cur = frontier.pop()
            for ch in children[cur]:
                if ch not in reached:
                    reached.add(ch)
                    frontier.append(ch)
        if len(reached) != obj.k:
            diags.append("UnreachableLinks")
    return diags


def forward_kinematics(obj: ArticulatedObject, q) -> list:
    """Per-link 4x4 world transforms at configuration q.

    q holds one value per jointed link in link order; fixed joints ignore
    their entry. Values outside [lower, upper] raise LimitViolation
    (continuous joints are unconstrained).
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    jointed = [i for i, l in enumerate(obj.links) if l.joint is not None]
    if len(q) != len(jointed):
        raise InvalidArgument(f"expected {len(jointed)} joint values, got {len(q)}")
    qmap = dict(zip(jointed, q))

    transforms: list = [None] * obj.k
    root = obj.base_index
    transforms[root] = np.eye(4)

    remaining = [i for i in range(obj.k) if i != root]
    guard = 0
    while remaining:
        progressed = False
        for i in list(remaining):
            j = obj.links[i].joint
            if transforms[j.parent] is None:
                continue
            qi = qmap[i]
            if j.joint_type in LIMITED_TYPES and j.has_limits:
                if qi < j.lower - 1e-12 or qi > j.upper + 1e-12:
                    raise LimitViolation(
                        f"{obj.links[i].name}: q={qi} outside [{j.lower}, {j.upper}]")
            T = np.eye(4)
            T[:3, 3] = j.origin
            if j.joint_type in ("revolute", "continuous"):
                T[:3, :3] = rotation_about_axis(j.axis, qi)
            elif j.joint_type == "prismatic":
                T[:3, 3] = j.origin + qi * j.axis / np.linalg.norm(j.axis)
            transforms[i] = transforms[j.parent] @ T
            remaining.remove(i)
            progressed = True
        guard += 1
        if not progressed or guard > obj.k + 1:
            raise InvalidKinematicTree("joint graph has a cycle or unreachable links")
    return transforms


def apply_similarity(obj: ArticulatedObject, t: SimilarityTransform) -> ArticulatedObject:
    """Rescale and reposition the whole object.

    The root link mesh and root-anchored joint origins take the full
    transform; deeper origins and non-root meshes take the linear part only,
    so assembled world geometry maps by t and forward kinematics commutes
    with the transform. Axes rotate without scaling; prismatic limits scale,
    revolute limits are angles and do not.
    """
    if t.scale <= 0:
        raise InvalidArgument("similarity scale must be positive")
    root = obj.base_index
    linear = SimilarityTransform(t.rotation, np.zeros(3), t.scale)
    links = []
    for i, link in enumerate(obj.links):
        xform = t if i == root else linear
        mesh = TriangleMesh(xform.apply(link.mesh.vertices), link.mesh.triangles)
        joint = link.joint
        if joint is not None:
            lower, upper = joint.lower, joint.upper
            if joint.joint_type == "prismatic" and joint.has_limits:
                lower, upper = lower * t.scale, upper * t.scale
            origin_xform = t if joint.parent == root else linear
            joint = replace(joint, origin=origin_xform.apply(joint.origin),
                            axis=t.apply_vector(joint.axis), lower=lower, upper=upper)
        links.append(Link(link.name, mesh, joint))
    return ArticulatedObject(links)


# ---------------------------------------------------------------------------
# URDF XML


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _fmt3(v) -> str:
    return " ".join(_fmt(x) for x in np.asarray(v).reshape(3))


def emit_urdf(obj: ArticulatedObject, mesh_dir, robot_name: str = "object",
              mesh_subdir: str = "meshes") -> str:
    """Write link meshes as OBJ files and return deterministic URDF XML.

    Mesh files land in mesh_dir/mesh_subdir and are referenced relatively.
    """
    mesh_dir = Path(mesh_dir)
    out = io.StringIO()
    out.write(f'<?xml version="1.0"?>\n<robot name="{robot_name}">\n')
    for link in obj.links:
        rel = f"{mesh_subdir}/{link.name}.obj"
        save_obj(link.mesh, mesh_dir / rel)
        out.write(f'  <link name="{link.name}">\n')
        for tag in ("visual", "collision"):
            out.write(f'    <{tag}>\n      <geometry>\n'
                      f'        <mesh filename="{rel}"/>\n'
                      f'      </geometry>\n    </{tag}>\n')
        out.write('  </link>\n')
    for link in obj.links:
        j = link.joint
        if j is None:
            continue
        out.write(f'  <joint name="joint_{link.name}" type="{j.joint_type}">\n')
        out.write(f'    <origin xyz="{_fmt3(j.origin)}" rpy="0 0 0"/>\n')
        if j.joint_type != "fixed":
            out.write(f'    <axis xyz="{_fmt3(j.axis)}"/>\n')
        if j.joint_type in LIMITED_TYPES and j.has_limits:
            out.write(f'    <limit lower="{_fmt(j.lower)}" upper="{_fmt(j.upper)}"/>\n')
        out.write(f'    <parent link="{obj.links[j.parent].name}"/>\n')
        out.write(f'    <child link="{link.name}"/>\n')
        out.write('  </joint>\n')
    out.write('</robot>\n')
    return out.getvalue()


def save_urdf(obj: ArticulatedObject, out_dir, robot_name: str = "object",
              urdf_name: str = "object.urdf") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = emit_urdf(obj, out_dir, robot_name=robot_name)
    path = out_dir / urdf_name
    path.write_text(text)
    return path


def default_mesh_loader(base_dir) -> Callable[[str], TriangleMesh]:
    base = Path(base_dir)

    def load(rel: str) -> TriangleMesh:
        path = base / rel
        if not path.exists():
            raise MeshResolutionError(f"mesh file not found: {path}")
        return load_obj(path)

    return load


def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    return (rotation_about_axis([0, 0, 1], y)
            @ rotation_about_axis([0, 1, 0], p)
            @ rotation_about_axis([1, 0, 0], r))


def parse_urdf(text: str, mesh_loader: Callable[[str], TriangleMesh]) -> ArticulatedObject:
    """Parse the supported URDF subset; unsupported elements are ignored."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise InvalidArgument(f"malformed URDF XML: {exc}") from exc

    meshes = {}
    order = []
    for el in root.findall("link"):
        name = el.get("name")
        mesh_el = el.find("./visual/geometry/mesh")
        if mesh_el is None:
            mesh_el = el.find("./collision/geometry/mesh")
        if mesh_el is None:
            raise MeshResolutionError(f"link {name} has no mesh reference")
        meshes[name] = mesh_loader(mesh_el.get("filename"))
        order.append(name)

    joints = {}
    for el in root.findall("joint"):
        jtype = el.get("type")
        if jtype not in JOINT_TYPES:
            continue  # unsupported joint types ignored
        child = el.find("child").get("link")
        parent = el.find("parent").get("link")
        origin_el = el.find("origin")
        origin = np.zeros(3)
        rpy = np.zeros(3)
        if origin_el is not None:
            if origin_el.get("xyz"):
                origin = np.array([float(x) for x in origin_el.get("xyz").split()])
            if origin_el.get("rpy"):
                rpy = np.array([float(x) for x in origin_el.get("rpy").split()])
        axis = np.array([1.0, 0.0, 0.0])
        axis_el = el.find("axis")
        if axis_el is not None and axis_el.get("xyz"):
            axis = np.array([float(x) for x in axis_el.get("xyz").split()])
        lower = upper = None
        limit_el = el.find("limit")
        if limit_el is not None and jtype in LIMITED_TYPES:
            lower = float(limit_el.get("lower", 0.0))
            upper = float(limit_el.get("upper", 0.0))
            if lower > upper:
                raise InvalidLimits(f"joint for link {child}: lower {lower} > upper {upper}")
        if np.any(rpy != 0):
            # fold child-frame orientation into the child mesh and axis
            R = _rpy_matrix(rpy)
            m = meshes[child]
            meshes[child] = TriangleMesh(m.vertices @ R.T, m.triangles)
            axis = R @ axis
        joints[child] = (parent, origin, axis, jtype, lower, upper)

    name_to_idx = {n: i for i, n in enumerate(order)}
    bases = [n for n in order if n not in joints]
    if len(bases) != 1:
        raise InvalidKinematicTree(f"expected one root link, found {len(bases)}")
    links = []
    for name in order:
        if name in joints:
            parent, origin, axis, jtype, lower, upper = joints[name]
            if parent not in name_to_idx:
                raise InvalidKinematicTree(f"unknown parent link {parent}")
            spec = JointSpec(origin, axis, jtype, lower, upper, name_to_idx[parent])
        else:
            spec = None
        links.append(Link(name, meshes[name], spec))
    obj = ArticulatedObject(links)
    forward_kinematics(obj, _zero_configuration(obj))  # raises on cycles
    return obj


def _zero_configuration(obj: ArticulatedObject) -> np.ndarray:
    vals = []
    for link in obj.links:
        j = link.joint
        if j is None:
            continue
        if j.joint_type in LIMITED_TYPES and j.has_limits and (j.lower > 0 or j.upper < 0):
            vals.append(j.lower)  # zero outside the range: rest at the lower stop
        else:
            vals.append(0.0)
    return np.asarray(vals)


def load_urdf(path, mesh_dir=None) -> ArticulatedObject:
    path = Path(path)
    loader = default_mesh_loader(mesh_dir if mesh_dir is not None else path.parent)
    return parse_urdf(path.read_text(), loader)
