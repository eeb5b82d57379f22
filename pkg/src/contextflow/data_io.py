"""Datasets on disk, synthetic data, and checkpoints.

On disk a dataset is a JSON manifest plus one CSV per time point with the
header ``x,y,label,f1..fd[,lr1..lrp]``. Lines starting with ``#`` before the
header are provenance comments and are skipped on read.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import SpatialSlice, default_radius, local_lr_score
from .trainer import LongitudinalDataset
from .velocity import AdamState, VelocityField

FORMAT_VERSION = 1
CHECKPOINT_FORMAT = "contextflow-checkpoint"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DimensionError(CheckpointError):
    pass


def normalize_times(raw_times) -> List[float]:
    raw = [float(t) for t in raw_times]
    lo, hi = raw[0], raw[-1]
    if any(b <= a for a, b in zip(raw[:-1], raw[1:])):
        raise DatasetError(f"raw times must be strictly increasing, got {raw}")
    out = [(t - lo) / (hi - lo) for t in raw]
    out[0], out[-1] = 0.0, 1.0
    return out


def slice_header(d: int, p: int = 0) -> List[str]:
    return ["x", "y", "label"] + [f"f{i + 1}" for i in range(d)] + [f"lr{i + 1}" for i in range(p)]


def write_slice_csv(path, slice_: SpatialSlice, comments: Optional[List[str]] = None):
    p = 0 if slice_.lr_features is None else slice_.lr_features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(slice_header(slice_.d, p))
        for k in range(slice_.n):
            label = "" if slice_.labels is None else str(slice_.labels[k])
            row = [repr(float(v)) for v in slice_.coords[k]] + [label]
            row += [repr(float(v)) for v in slice_.expr[k]]
            if p:
                row += [repr(float(v)) for v in slice_.lr_features[k]]
            w.writerow(row)


def read_slice_csv(path, time: float = 0.0, d: Optional[int] = None, p: Optional[int] = None) -> SpatialSlice:
    """Parse one slice file. Errors carry the file name, line and column."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        numbered = [(i + 1, ln) for i, ln in enumerate(fh) if not ln.startswith("#")]
    phys = [i for i, _ in numbered]
    rows = list(csv.reader(ln for _, ln in numbered))
    if not rows:
        raise DatasetError(f"{path}: missing header")
    header = rows[0]
    n_f = sum(1 for h in header if h.startswith("f"))
    n_lr = sum(1 for h in header if h.startswith("lr"))
    if header != slice_header(n_f, n_lr):
        raise DatasetError(f"{path}: header must read x,y,label,f1..fd[,lr1..lrp], got {','.join(header)}")
    if d is not None and n_f != d:
        raise DatasetError(f"{path}: expected {d} feature columns, found {n_f}")
    if p is not None and n_lr != p:
        raise DatasetError(f"{path}: expected {p} ligand-receptor columns, found {n_lr}")
    body = rows[1:]
    if not body:
        raise DatasetError(f"{path}: slice has no cells")
    width = len(header)
    values = np.empty((len(body), width - 1))
    labels = []
    for r, row in enumerate(body):
        line_no = phys[r + 1]
        if len(row) != width:
            raise DatasetError(f"{path}: line {line_no} has {len(row)} columns, expected {width}")
        labels.append(row[2])
        for c, cell in enumerate(row):
            if c == 2:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: line {line_no} (row {r}), column {header[c]!r}: "
                                  f"not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise DatasetError(f"{path}: line {line_no} (row {r}), column {header[c]!r}: "
                                  f"non-finite value {cell!r}")
            values[r, c if c < 2 else c - 1] = v
    coords = values[:, :2]
    expr = values[:, 2:2 + n_f]
    lr = values[:, 2 + n_f:] if n_lr else None
    labs = None if all(lab == "" for lab in labels) else np.asarray(labels, dtype=object)
    return SpatialSlice(time, expr, coords, lr, labs)


def save_dataset(dataset: LongitudinalDataset, out_dir, raw_times=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_times = list(raw_times) if raw_times is not None else dataset.meta.get("raw_times", dataset.times)
    entries = []
    for i, (s, t) in enumerate(zip(dataset.slices, raw_times)):
        name = f"slice_{i}.csv"
        write_slice_csv(out / name, s)
        entries.append({"path": name, "time": float(t), "n": s.n})
    p = dataset[0].lr_features.shape[1] if dataset[0].lr_features is not None else 0
    manifest = {
        "format_version": FORMAT_VERSION,
        "feature_dim": dataset.d,
        "lr_dim": p,
        "slices": entries,
    }
    for key in ("label_vocab", "lr_pairs", "forbidden_transitions", "synth_config"):
        if key in dataset.meta:
            manifest[key] = dataset.meta[key]
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path) -> LongitudinalDataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{manifest_path}: cannot read manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported format_version {version!r}")
    entries = manifest.get("slices") or []
    if len(entries) < 2:
        raise DatasetError(f"{manifest_path}: need at least two slices")
    d = int(manifest["feature_dim"])
    p = int(manifest.get("lr_dim", 0))
    raw_times = [float(e["time"]) for e in entries]
    try:
        times = normalize_times(raw_times)
    except DatasetError as exc:
        raise DatasetError(f"{manifest_path}: {exc}") from None

    lr_pairs = manifest.get("lr_pairs")
    slices = []
    for e, t in zip(entries, times):
        s = read_slice_csv(manifest_path.parent / e["path"], t, d, p)
        if "n" in e and int(e["n"]) != s.n:
            raise DatasetError(f"{e['path']}: manifest lists {e['n']} cells, file has {s.n}")
        if s.lr_features is None and lr_pairs:
            # no precomputed LR activity: fall back to local co-expression scores
            r = lr_pairs.get("radius") or default_radius(s.coords)
            lr = local_lr_score(s, lr_pairs["ligand_cols"], lr_pairs["receptor_cols"], r)
            s = SpatialSlice(s.time, s.expr, s.coords, lr, s.labels)
        slices.append(s)

    meta = {"raw_times": raw_times}
    for key in ("label_vocab", "lr_pairs", "forbidden_transitions", "synth_config"):
        if key in manifest:
            meta[key] = manifest[key]
    return LongitudinalDataset(slices, meta)


@dataclass
class SynthConfig:
    """Gaussian cell-type blobs moving through expression space.

    A type's mean at normalized time ``t`` is
    ``base + drift * t + curvature * t**2``. Each type occupies its own disk in
    tissue coordinates, and its LR features are a fixed per-type signature
    scaled by ``lr_strength`` plus small noise. With ``persistent_cells`` the
    same cells (same offsets and positions) appear in every slice, so every
    slice is an exact translate of the first when all drifts agree and the
    curvature is zero.
    """

    n_times: int = 3
    cells_per_slice: int = 300
    n_types: int = 2
    dim: int = 10
    drift: Optional[list] = None
    curvature: Optional[list] = None
    type_means: Optional[list] = None
    separation: float = 3.0
    noise: float = 1.0
    spatial_spacing: float = 3.0
    spatial_radius: float = 1.0
    lr_dim: int = 4
    lr_strength: float = 1.0
    lr_noise: float = 0.1
    forbidden: list = field(default_factory=list)
    persistent_cells: bool = False
    raw_times: Optional[list] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_times < 2:
            raise ValueError("need at least two time points")
        if self.n_types < 1 or self.cells_per_slice < 1 or self.dim < 1:
            raise ValueError("need at least one type, one cell and one feature")
        for name in ("drift", "curvature", "type_means"):
            val = getattr(self, name)
            if val is not None and np.shape(val) != (self.n_types, self.dim):
                raise ValueError(f"{name} must have shape ({self.n_types}, {self.dim})")
        if self.raw_times is not None and len(self.raw_times) != self.n_times:
            raise ValueError("raw_times must list one time per slice")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def type_names(self) -> List[str]:
        return [f"type{k}" for k in range(self.n_types)]


def generate_synthetic(cfg: SynthConfig) -> LongitudinalDataset:
    rng = np.random.default_rng(cfg.seed)
    K, d = cfg.n_types, cfg.dim
    base = np.asarray(cfg.type_means, float) if cfg.type_means is not None else cfg.separation * rng.standard_normal((K, d))
    drift = np.asarray(cfg.drift, float) if cfg.drift is not None else np.zeros((K, d))
    curv = np.asarray(cfg.curvature, float) if cfg.curvature is not None else np.zeros((K, d))
    lr_sig = rng.standard_normal((K, cfg.lr_dim)) if cfg.lr_dim else None
    centers = np.stack([np.array([k * cfg.spatial_spacing, 0.0]) for k in range(K)])
    names = np.asarray(cfg.type_names(), dtype=object)
    n = cfg.cells_per_slice
    raw_times = cfg.raw_times if cfg.raw_times is not None else list(range(cfg.n_times))
    times = normalize_times(raw_times)

    def draw_cells():
        types = np.sort(rng.integers(0, K, size=n)) if K > 1 else np.zeros(n, dtype=int)
        offsets = cfg.noise * rng.standard_normal((n, d))
        ang = rng.uniform(0, 2 * np.pi, size=n)
        rad = cfg.spatial_radius * np.sqrt(rng.uniform(0, 1, size=n))
        coords = centers[types] + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        lr_eps = rng.standard_normal((n, cfg.lr_dim)) if cfg.lr_dim else None
        return types, offsets, coords, lr_eps

    cells = draw_cells()
    slices = []
    for i, t in enumerate(times):
        if i > 0 and not cfg.persistent_cells:
            cells = draw_cells()
        types, offsets, coords, lr_eps = cells
        means = base + drift * t + curv * t * t
        expr = means[types] + offsets
        lr = None
        if cfg.lr_dim:
            lr = cfg.lr_strength * lr_sig[types] + cfg.lr_noise * lr_eps
        slices.append(SpatialSlice(t, expr, coords, lr, names[types]))

    meta = {
        "raw_times": [float(t) for t in raw_times],
        "label_vocab": cfg.type_names(),
        "synth_config": json.loads(json.dumps(asdict(cfg))),
    }
    if cfg.forbidden:
        meta["forbidden_transitions"] = [[str(a), str(b)] for a, b in cfg.forbidden]
    return LongitudinalDataset(slices, meta)


def _payload_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, field_: VelocityField, state: Optional[AdamState], config: Optional[dict] = None):
    payload = {
        "dim": field_.dim,
        "hidden": list(field_.hidden),
        "activation": field_.activation,
        "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in field_.params],
        "optimizer": None if state is None else {
            "step": state.step, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "m": [m.ravel().tolist() for m in state.m],
            "v": [v.ravel().tolist() for v in state.v],
        },
        "config": config or {},
    }
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "sha256": _payload_digest(payload), "payload": payload}
    Path(path).write_text(json.dumps(record, sort_keys=True), encoding="utf-8")


def load_checkpoint(path, expected_dim: Optional[int] = None):
    """Return ``(field, optimizer_state_or_None, config)``."""
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: corrupt checkpoint (cannot decode, checksum unverifiable): {exc}") from exc
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {record.get('version')!r}, "
                                     f"expected {CHECKPOINT_VERSION}")
    payload = record.get("payload")
    if not isinstance(payload, dict) or _payload_digest(payload) != record.get("sha256"):
        raise ChecksumError(f"{path}: checksum mismatch")
    dim = int(payload["dim"])
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{path}: checkpoint is for dimension {dim}, data has {expected_dim}")
    params = [np.asarray(p["values"], dtype=float).reshape(p["shape"]) for p in payload["params"]]
    field_ = VelocityField.from_params(params, dim, payload["activation"])
    if field_.weights[0].shape[0] != dim + 5 or field_.weights[-1].shape[1] != dim:
        raise DimensionError(f"{path}: layer shapes do not match dimension {dim}")
    opt = payload.get("optimizer")
    state = None
    if opt is not None:
        shapes = [p.shape for p in params]
        state = AdamState(
            [np.asarray(m, dtype=float).reshape(s) for m, s in zip(opt["m"], shapes)],
            [np.asarray(v, dtype=float).reshape(s) for v, s in zip(opt["v"], shapes)],
            int(opt["step"]), float(opt["lr"]), float(opt["beta1"]), float(opt["beta2"]), float(opt["eps"]),
        )
    return field_, state, payload.get("config", {})


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
