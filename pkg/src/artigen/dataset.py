"""Dataset ingestion, canonical link ordering, toy data, and latent caching."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec import CodecConfig, LatentShapeCode, encode, read_lsc, write_lsc
from .errors import MeshResolutionError, SchemaError
from .geometry import TriangleMesh, box_mesh, merge_meshes, normalize_to_unit_cube, sample_surface
from .io_obj import load_obj, save_obj
from .transforms import SimilarityTransform
from .urdf import ArticulatedObject, JointSpec, Link, apply_similarity, forward_kinematics

_JOINT_KEYS = ("origin_xyz", "axis_xyz", "motion_type", "lower", "upper")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    urdf: str
    links: tuple  # dicts with the exact on-disk field names
    whole_image: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(dict(l) for l in self.links))


@dataclass(frozen=True)
class LatentCacheEntry:
    record_id: str
    z_whole: LatentShapeCode
    z_parts_prefix: tuple  # z_pre^[1:k] for k = 1..K
    z_part: tuple  # per-link latent, canonical order

    def __post_init__(self):
        object.__setattr__(self, "z_parts_prefix", tuple(self.z_parts_prefix))
        object.__setattr__(self, "z_part", tuple(self.z_part))
        if len(self.z_parts_prefix) != len(self.z_part):
            raise SchemaError("prefix sequence length must equal link count")


@dataclass(frozen=True)
class ConditionSet:
    whole_tokens: LatentShapeCode
    image_tokens: Optional[np.ndarray] = None  # file-supplied feature vectors
    context_tokens: Optional[LatentShapeCode] = None


# ---------------------------------------------------------------------------
# record ingestion


def _parse_triple(text: str) -> np.ndarray:
    vals = [float(x) for x in str(text).split()]
    if len(vals) != 3:
        raise SchemaError(f"expected a space-separated triple, got {text!r}")
    return np.asarray(vals)


def record_from_json(data: dict) -> DatasetRecord:
    for key in ("id", "urdf", "links"):
        if key not in data:
            raise SchemaError(f"record is missing required key {key!r}")
    links = data["links"]
    if not links:
        raise SchemaError("record has no links")
    for entry in links:
        if "name" not in entry or "obj" not in entry:
            raise SchemaError("link entry must have 'name' and 'obj'")
        present = [k for k in _JOINT_KEYS if k in entry]
        if present and len(present) != len(_JOINT_KEYS):
            raise SchemaError(
                f"link {entry['name']}: partial joint fields {present}")
    bases = [e for e in links if "motion_type" not in e]
    if len(bases) != 1:
        raise SchemaError(f"record must have exactly one base link, found {len(bases)}")
    return DatasetRecord(str(data["id"]), data["urdf"], links,
                         data.get("whole_image"))


def load_record(path):
    """Load a dataset JSON record and its meshes as a normalized object.

    All links share one normalization transform (computed on the assembled
    zero-configuration geometry) so parts stay mutually aligned.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    record = record_from_json(data)

    base_dir = path.parent
    links = []
    names = [e["name"] for e in record.links]
    base_name = next(e["name"] for e in record.links if "motion_type" not in e)
    base_idx = names.index(base_name)
    for entry in record.links:
        mesh_path = base_dir / entry["obj"]
        if not mesh_path.exists():
            raise MeshResolutionError(f"missing OBJ file {mesh_path}")
        mesh = load_obj(mesh_path)
        joint = None
        if "motion_type" in entry:
            lower = entry.get("lower")
            upper = entry.get("upper")
            joint = JointSpec(_parse_triple(entry["origin_xyz"]),
                              _parse_triple(entry["axis_xyz"]),
                              entry["motion_type"],
                              None if lower is None else float(lower),
                              None if upper is None else float(upper),
                              parent=base_idx)
        links.append(Link(entry["name"], mesh, joint))
    obj = ArticulatedObject(links)
    _, transform = normalize_to_unit_cube(obj.assembled_mesh())
    return record, apply_similarity(obj, transform)


# ---------------------------------------------------------------------------
# canonical link ordering


def _world_aabb_min(obj: ArticulatedObject) -> list:
    from .urdf import _zero_configuration
    transforms = forward_kinematics(obj, _zero_configuration(obj))
    mins = []
    for link, T in zip(obj.links, transforms):
        verts = link.mesh.vertices @ T[:3, :3].T + T[:3, 3]
        mins.append(verts.min(axis=0))
    return mins


def canonical_link_order(obj: ArticulatedObject, tol: float = 0.02) -> ArticulatedObject:
    """Base first, then movable links sorted bottom-to-top (Z), left-to-right
    (X), front-to-back (Y) on their world Aabb minima.

    Coordinates are bucketed at `tol` so near-equal values fall through to
    the next axis; link names break exact ties, making the order a pure
    function of the link set (permutation invariant).
    """
    mins = _world_aabb_min(obj)
    base = obj.base_index

    def key(i):
        z, x, y = mins[i][2], mins[i][0], mins[i][1]
        return (int(np.floor(z / tol + 0.5)), int(np.floor(x / tol + 0.5)),
                int(np.floor(y / tol + 0.5)), obj.links[i].name)

    movable = sorted((i for i in range(obj.k) if i != base), key=key)
    order = [base] + movable
    remap = {old: new for new, old in enumerate(order)}
    links = []
    for old in order:
        link = obj.links[old]
        if link.joint is not None:
            from dataclasses import replace
            link = Link(link.name, link.mesh,
                        replace(link.joint, parent=remap[link.joint.parent]))
        links.append(link)
    return ArticulatedObject(links)


# ---------------------------------------------------------------------------
# procedural toy dataset

TOY_FAMILIES = ("hinged_box", "drawer_box", "laptop")


def _hinged_box(rng) -> ArticulatedObject:
    a = rng.uniform(0.5, 0.9)
    b = rng.uniform(0.35, 0.65)
    c = rng.uniform(0.5, 0.9)
    th = rng.uniform(0.08, 0.12)
    side = 1.0 if rng.random() < 0.5 else -1.0  # hinge side along x
    body = box_mesh([-a, -b, -c], [a, b, c])
    panel = box_mesh([-a, b, -c], [a, b + th, c])
    hw = 0.06
    hx = -side * (a - 0.15)
    hd = rng.uniform(0.08, 0.15)
    hh = min(0.1, 0.5 * c)
    handle = box_mesh([hx - hw, b + th, -hh], [hx + hw, b + th + hd, hh])
    origin = np.array([side * a, b, 0.0])
    door_world = merge_meshes([panel, handle])
    door = TriangleMesh(door_world.vertices - origin, door_world.triangles)
    joint = JointSpec(origin, [0.0, 0.0, 1.0], "revolute", 0.0, np.pi / 2, parent=0)
    return ArticulatedObject([Link("base", body, None), Link("door", door, joint)])


def _drawer_box(rng) -> ArticulatedObject:
    a = rng.uniform(0.5, 0.9)
    b = rng.uniform(0.4, 0.7)
    c = rng.uniform(0.5, 0.9)
    body = box_mesh([-a, -b, -c], [a, b, c])
    g = 0.08
    zc = rng.uniform(-c + 0.3, c - 0.3)
    dh = rng.uniform(0.25, min(0.45, c - abs(zc) - 0.05))
    ft = 0.1
    front = box_mesh([-a + g, b, zc - dh], [a - g, b + ft, zc + dh])
    hw = 0.06
    hd = rng.uniform(0.08, 0.15)
    handle = box_mesh([-hw, b + ft, zc - 0.05], [hw, b + ft + hd, zc + 0.05])
    origin = np.array([0.0, b, zc])
    drawer_world = merge_meshes([front, handle])
    drawer = TriangleMesh(drawer_world.vertices - origin, drawer_world.triangles)
    depth = 2 * b
    joint = JointSpec(origin, [0.0, 1.0, 0.0], "prismatic", 0.0, 0.9 * depth, parent=0)
    return ArticulatedObject([Link("base", body, None), Link("drawer", drawer, joint)])


def _laptop(rng) -> ArticulatedObject:
    a = rng.uniform(0.6, 0.9)
    b = rng.uniform(0.45, 0.7)
    tb = rng.uniform(0.08, 0.15)
    tl = rng.uniform(0.06, 0.1)
    body = box_mesh([-a, -b, 0.0], [a, b, tb])
    lid_world = box_mesh([-a, -b, tb], [a, b, tb + tl])
    origin = np.array([0.0, b, tb])
    lid = TriangleMesh(lid_world.vertices - origin, lid_world.triangles)
    upper = rng.uniform(1.6, 2.1)
    # axis -x so positive q opens the lid upward about the back edge
    joint = JointSpec(origin, [-1.0, 0.0, 0.0], "revolute", 0.0, upper, parent=0)
    return ArticulatedObject([Link("base", body, None), Link("lid", lid, joint)])


_TOY_BUILDERS = {"hinged_box": _hinged_box, "drawer_box": _drawer_box, "laptop": _laptop}


def record_for_object(obj: ArticulatedObject, record_id: str) -> DatasetRecord:
    """Ground-truth DatasetRecord mirroring the on-disk JSON field layout."""
    entries = []
    for i, link in enumerate(obj.links):
        entry = {"name": link.name, "obj": f"{link.name}.obj"}
        j = link.joint
        if j is not None:
            entry["origin_xyz"] = " ".join(repr(float(x)) for x in j.origin)
            entry["axis_xyz"] = " ".join(repr(float(x)) for x in j.axis)
            entry["motion_type"] = j.joint_type
            entry["lower"] = j.lower
            entry["upper"] = j.upper
        entries.append(entry)
    return DatasetRecord(record_id, f"{record_id}.urdf", entries)


def generate_toy_dataset(n: int, family: str, seed: int):
    """Procedural articulated objects with ground-truth joints.

    Returns a list of (DatasetRecord, ArticulatedObject); deterministic per
    seed. Mixed datasets can be built by concatenating families.
    """
    if family not in _TOY_BUILDERS:
        raise SchemaError(f"unknown toy family {family!r}")
    if n < 1:
        raise SchemaError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        obj = _TOY_BUILDERS[family](rng)
        _, transform = normalize_to_unit_cube(obj.assembled_mesh())
        obj = canonical_link_order(apply_similarity(obj, transform))
        rec_id = f"{family}_{seed}_{i:04d}"
        out.append((record_for_object(obj, rec_id), obj))
    return out


def write_record(record: DatasetRecord, obj: ArticulatedObject, out_dir) -> Path:
    """Materialize a record as JSON plus per-link OBJ files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for link, entry in zip(obj.links, record.links):
        save_obj(link.mesh, out_dir / entry["obj"])
    payload = {"id": record.id, "whole_image": record.whole_image,
               "urdf": record.urdf, "links": list(record.links)}
    path = out_dir / f"{record.id}.json"
    path.write_text(json.dumps(payload, indent=2))
    return path


# ---------------------------------------------------------------------------
# latent cache


def record_seed(record_id: str, role: str) -> int:
    return zlib.crc32(f"{record_id}:{role}".encode())


def _round_f32(code: LatentShapeCode) -> LatentShapeCode:
    # cache files store float32; keep in-memory entries bit-identical to disk
    return LatentShapeCode(code.tokens.astype(np.float32).astype(np.float64))


def _encode_mesh(mesh: TriangleMesh, cfg: CodecConfig, seed: int) -> LatentShapeCode:
    cloud = sample_surface(mesh, cfg.n_sample_points, seed)
    return _round_f32(encode(cloud, cfg))


def world_link_meshes(obj: ArticulatedObject) -> list:
    from .urdf import _zero_configuration
    transforms = forward_kinematics(obj, _zero_configuration(obj))
    out = []
    for link, T in zip(obj.links, transforms):
        out.append(TriangleMesh(link.mesh.vertices @ T[:3, :3].T + T[:3, 3],
                                link.mesh.triangles))
    return out


def precompute_latents(records, cfg: CodecConfig):
    """One LatentCacheEntry per (record, object) pair.

    z_whole encodes the assembled object, z_part each link in the world
    frame, and z_parts_prefix the re-encoded merged prefixes in link order.
    """
    entries = []
    for record, obj in records:
        try:
            meshes = world_link_meshes(obj)
            whole = _encode_mesh(merge_meshes(meshes), cfg,
                                 record_seed(record.id, "whole"))
            parts, prefixes = [], []
            for k in range(len(meshes)):
                parts.append(_encode_mesh(meshes[k], cfg,
                                          record_seed(record.id, f"part{k}")))
                prefix_mesh = merge_meshes(meshes[: k + 1])
                prefixes.append(_encode_mesh(prefix_mesh, cfg,
                                             record_seed(record.id, f"pre{k}")))
            entries.append(LatentCacheEntry(record.id, whole, prefixes, parts))
        except Exception as exc:
            raise type(exc)(f"record {record.id}: {exc}") from exc
    return entries


def write_latent_cache(entries, cfg: CodecConfig, cache_dir) -> Path:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"codec": {"m_tokens": cfg.m_tokens, "feature_width": cfg.feature_width,
                          "n_sample_points": cfg.n_sample_points},
                "records": []}
    for entry in entries:
        files = {"whole": f"{entry.record_id}__whole.lsc"}
        write_lsc(entry.z_whole, cache_dir / files["whole"])
        files["parts"], files["prefixes"] = [], []
        for k, (part, prefix) in enumerate(zip(entry.z_part, entry.z_parts_prefix)):
            pf = f"{entry.record_id}__part{k}.lsc"
            xf = f"{entry.record_id}__pre{k}.lsc"
            write_lsc(part, cache_dir / pf)
            write_lsc(prefix, cache_dir / xf)
            files["parts"].append(pf)
            files["prefixes"].append(xf)
        manifest["records"].append({"id": entry.record_id, "files": files})
    path = cache_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_latent_cache(cache_dir):
    cache_dir = Path(cache_dir)
    manifest = json.loads((cache_dir / "manifest.json").read_text())
    cfg = CodecConfig(**manifest["codec"])
    entries = []
    for rec in manifest["records"]:
        files = rec["files"]
        entries.append(LatentCacheEntry(
            rec["id"],
            read_lsc(cache_dir / files["whole"]),
            [read_lsc(cache_dir / f) for f in files["prefixes"]],
            [read_lsc(cache_dir / f) for f in files["parts"]],
        ))
    return entries, cfg
