"""Dataset manifests, stratified splitting and the synthetic longitudinal generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .meshgeom import TemplateMesh, build_adjacency, write_mesh

logger = logging.getLogger(__name__)

MAX_VISITS = 8
MAX_MONTH = 72
HEADER = "patient_id\tlabel\tage\tsex\tmonth\tmesh\tadas"
LABELS = ("stable", "converter")


class ManifestError(ValueError):
    pass


@dataclass
class Visit:
    month: int
    mesh: str | None = None
    adas: float | None = None


@dataclass
class PatientRecord:
    patient_id: str
    label: str
    age: float
    sex: str
    visits: list[Visit] = field(default_factory=list)


@dataclass
class DatasetManifest:
    patients: list[PatientRecord]
    root: Path | None = None

    def __len__(self):
        return len(self.patients)

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.patients == other.patients

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([p for p in self.patients if p.patient_id in keep], self.root)

    def resolve(self, mesh_path: str) -> Path:
        p = Path(mesh_path)
        return p if p.is_absolute() or self.root is None else self.root / p


def _fmt(x) -> str:
    return "-" if x is None else repr(float(x))


def validate_patient(p: PatientRecord) -> None:
    if not p.visits:
        raise ManifestError(f"patient {p.patient_id}: no visits")
    if len(p.visits) > MAX_VISITS:
        raise ManifestError(f"patient {p.patient_id}: {len(p.visits)} visits exceed the {MAX_VISITS}-visit limit")
    months = [v.month for v in p.visits]
    if any(b <= a for a, b in zip(months, months[1:])):
        raise ManifestError(f"patient {p.patient_id}: months not strictly increasing")
    if months[0] != 0 or p.visits[0].mesh is None:
        raise ManifestError(f"patient {p.patient_id}: baseline visit (month 0 with mesh) missing")
    if months[-1] > MAX_MONTH or months[0] < 0:
        raise ManifestError(f"patient {p.patient_id}: month outside [0, {MAX_MONTH}]")
    if p.label not in LABELS:
        raise ManifestError(f"patient {p.patient_id}: unknown label {p.label!r}")


def save_manifest(path, manifest: DatasetManifest) -> None:
    lines = [HEADER]
    for p in manifest.patients:
        for v in p.visits:
            lines.append("\t".join([p.patient_id, p.label, repr(float(p.age)), p.sex, str(v.month),
                                    v.mesh if v.mesh is not None else "-", _fmt(v.adas)]))
    Path(path).write_text("\n".join(lines) + "\n")


def _mesh_vertex_count(path: Path) -> int:
    with open(path) as fh:
        header = fh.readline().split()
    if len(header) != 3 or header[0] != "MESH":
        raise ManifestError(f"{path}: not a mesh file")
    return int(header[1])


def load_manifest(path, n_template_vertices: int | None = None, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; mesh paths are relative to its directory."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ManifestError(f"{path}:1: bad header")
    patients: dict[str, PatientRecord] = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise ManifestError(f"{path}:{lineno}: expected 7 tab-separated columns, got {len(cols)}")
        pid, label, age, sex, month, mesh, adas = cols
        try:
            visit = Visit(int(month), None if mesh == "-" else mesh, None if adas == "-" else float(adas))
            age_v = float(age)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        rec = patients.get(pid)
        if rec is None:
            rec = patients[pid] = PatientRecord(pid, label, age_v, sex, [])
        elif (rec.label, rec.age, rec.sex) != (label, age_v, sex):
            raise ManifestError(f"{path}:{lineno}: patient {pid} has inconsistent demographics")
        rec.visits.append(visit)
    manifest = DatasetManifest(list(patients.values()), path.parent)
    for p in manifest.patients:
        validate_patient(p)
        if not check_files:
            continue
        for v in p.visits:
            if v.mesh is None:
                continue
            mp = manifest.resolve(v.mesh)
            if not mp.exists():
                raise ManifestError(f"patient {p.patient_id}: mesh file {mp} not found")
            if n_template_vertices is not None and _mesh_vertex_count(mp) != n_template_vertices:
                raise ManifestError(f"patient {p.patient_id}: {mp} does not match the template vertex count "
                                    f"{n_template_vertices}")
    return manifest


# ----------------------------------------------------------------------------
# Stratified split
# ----------------------------------------------------------------------------

AGE_EDGES = (65.0, 70.0, 75.0, 80.0, 85.0)


@dataclass
class SplitSpec:
    fractions: tuple = (0.7, 0.1, 0.2)
    age_edges: tuple = AGE_EDGES
    min_stratum: int = 3

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _allocate(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``n`` items."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def stratified_split(manifest: DatasetManifest, spec: SplitSpec | None = None, seed: int = 0):
    """Split into (train, validation, test) preserving age-bucket x sex x label proportions."""
    spec = spec or SplitSpec()
    strata: dict[tuple, list[PatientRecord]] = {}
    for p in manifest.patients:
        bucket = int(np.searchsorted(spec.age_edges, p.age, side="right"))
        strata.setdefault((p.sex, p.label, bucket), []).append(p)
    # merge undersized strata into the nearest age bucket of the same sex/label
    while True:
        small = sorted(k for k, v in strata.items() if len(v) < spec.min_stratum)
        merged = False
        for key in small:
            peers = [k for k in strata if k[:2] == key[:2] and k != key]
            if not peers:
                continue
            target = min(peers, key=lambda k: (abs(k[2] - key[2]), k[2]))
            logger.warning("stratum %s has %d patients; merged into age bucket %d", key, len(strata[key]), target[2])
            strata[target].extend(strata.pop(key))
            merged = True
            break
        if not merged:
            break
    rng = np.random.default_rng(seed)
    splits: list[list[str]] = [[], [], []]
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda p: p.patient_id)
        perm = rng.permutation(len(members))
        sizes = _allocate(len(members), spec.fractions)
        start = 0
        for s, size in enumerate(sizes):
            splits[s].extend(members[i].patient_id for i in perm[start:start + size])
            start += size
    return tuple(manifest.subset(ids) for ids in splits)


# ----------------------------------------------------------------------------
# Synthetic generator
# ----------------------------------------------------------------------------

@dataclass
class SynthProfile:
    noise_sigma: float = 0.005
    months: tuple = (0, 6, 12, 18, 24, 36, 48, 72)
    # 1 + 7 * p = 3.32 expected visits
    retention: float = 2.32 / 7
    min_visits: int = 1
    converter_prob: float = 0.5
    stable_slope: tuple = (0.0, 0.05)
    converter_slope: tuple = (0.1, 0.3)
    baseline_adas: tuple = (5.0, 20.0)
    adas_missing_prob: float = 0.05
    # RMS vertex displacement per ADAS point
    deformation_per_point: float = 0.004
    anatomy_scale: float = 0.02
    individual_direction: float = 0.5
    n_modes: int = 8
    smoothing_rounds: int = 10
    age_range: tuple = (55.0, 90.0)


PROFILES = {
    "default": SynthProfile(),
    # noise-free full schedules: slot k always means the same month, so the
    # disjoint slope ranges give disjoint per-slot deformation magnitudes
    "separable": SynthProfile(noise_sigma=0.0, retention=1.0, adas_missing_prob=0.0),
}


def deformation_basis(template: TemplateMesh, n_modes: int, rounds: int, rng) -> np.ndarray:
    """Smooth displacement modes (n_modes, V, 3), unit RMS vertex displacement."""
    nbrs = build_adjacency(template)
    modes = rng.normal(size=(n_modes, template.n_vertices, 3))
    for _ in range(rounds):
        modes = np.stack([(modes[:, i] + modes[:, nb].sum(axis=1)) / (1 + len(nb))
                          for i, nb in enumerate(nbrs)], axis=1)
    modes -= modes.mean(axis=1, keepdims=True)
    rms = np.sqrt((modes ** 2).sum(axis=2).mean(axis=1))
    return modes / rms[:, None, None]


def _unit_rms(field: np.ndarray) -> np.ndarray:
    return field / np.sqrt((field ** 2).sum(axis=1).mean())


def synth_generate(template: TemplateMesh, n_patients: int, seed: int, out_dir,
                   profile: SynthProfile | None = None) -> DatasetManifest:
    """Write ``n_patients`` synthetic sequences (meshes + manifest) under ``out_dir``."""
    profile = profile or SynthProfile()
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    basis_rng = np.random.default_rng([seed, 0xBA515])
    basis = deformation_basis(template, profile.n_modes, profile.smoothing_rounds, basis_rng)
    shared = basis_rng.normal(size=profile.n_modes)
    patients = []
    for i in range(n_patients):
        rng = np.random.default_rng([seed, i])
        pid = f"P{i:04d}"
        converter = rng.random() < profile.converter_prob
        label = LABELS[int(converter)]
        sex = "F" if rng.random() < 0.5 else "M"
        age = round(float(rng.uniform(*profile.age_range)), 1)
        lo, hi = profile.converter_slope if converter else profile.stable_slope
        slope = rng.uniform(lo, hi)
        adas0 = rng.uniform(*profile.baseline_adas)
        anatomy = profile.anatomy_scale * np.tensordot(rng.normal(size=profile.n_modes), basis, 1) / np.sqrt(profile.n_modes)
        own = rng.normal(size=profile.n_modes)
        direction = _unit_rms(np.tensordot(shared / np.linalg.norm(shared)
                                           + profile.individual_direction * own / np.sqrt(profile.n_modes), basis, 1))
        keep = [0] + [k for k in range(1, len(profile.months)) if rng.random() < profile.retention]
        if len(keep) < profile.min_visits:
            extra = rng.choice([k for k in range(1, len(profile.months)) if k not in keep],
                               profile.min_visits - len(keep), replace=False)
            keep = sorted(set(keep) | set(int(e) for e in extra))
        noise = rng.normal(size=(len(keep), template.n_vertices, 3))
        missing = rng.random(len(keep)) < profile.adas_missing_prob
        visits = []
        for j, k in enumerate(keep):
            month = profile.months[k]
            adas = float(np.clip(adas0 + slope * month, 0.0, 85.0))
            change = adas - float(np.clip(adas0, 0.0, 85.0))
            verts = (template.vertices + anatomy + profile.deformation_per_point * change * direction
                     + profile.noise_sigma * noise[j])
            rel = f"meshes/{pid}_m{month:02d}.mesh"
            write_mesh(out / rel, TemplateMesh(verts, template.faces))
            score = None if (j > 0 and missing[j]) else round(adas, 4)
            visits.append(Visit(month, rel, score))
        patients.append(PatientRecord(pid, label, age, sex, visits))
    manifest = DatasetManifest(patients, out)
    save_manifest(out / "manifest.tsv", manifest)
    write_mesh(out / "template.mesh", template)
    return manifest


def shuffle_labels(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    labels = [p.label for p in manifest.patients]
    perm = rng.permutation(len(labels))
    return DatasetManifest([replace(p, label=labels[j]) for p, j in zip(manifest.patients, perm)], manifest.root)
