"""Gallery/probe rank-K retrieval under randomized occlusion, repeated over runs."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data_model import SilhouetteDataset
from .detector import DetectorTrainConfig, OcclusionDetector, evaluate_detector, freeze, train_detector
from .errors import BadSpec, DimensionMismatch, MissingVideo
from .model import BetaCache, OcclusionAwareModel, embed_videos
from .occlusion import (ALL_CLASSES, OcclusionSpec, derive_seed, occlude_pixels, read_manifest,
                        sample_dynamic_spec, sample_spec, write_manifest)

SCHEMA_VERSION = 1
DEFAULT_RANKS = (1, 5, 10, 20)
CONSISTENT, DYNAMIC = "consistent", "dynamic"
FLAT, PART_MEAN = "flat", "part-mean"
ALL_CONDITIONS = "all"
PROTOCOL_FIELDS = ["role", "video_id", "subject_id", "condition", "start", "end"]
CORNER, HALF_HORIZONTAL, HALF_VERTICAL = (1, 2, 3, 4), (5, 6), (7, 8)


def pairwise_distances(probe_sigs: np.ndarray, gallery_sigs: np.ndarray, metric: str = FLAT) -> np.ndarray:
    p = np.asarray(probe_sigs, dtype=np.float64)
    g = np.asarray(gallery_sigs, dtype=np.float64)
    if p.shape[1:] != g.shape[1:]:
        raise DimensionMismatch(f"probe signatures {p.shape[1:]} vs gallery {g.shape[1:]}")
    if metric == FLAT:
        p, g = p.reshape(len(p), -1), g.reshape(len(g), -1)
        return np.stack([np.sqrt(((g - row) ** 2).sum(axis=1)) for row in p]) if len(p) else \
            np.zeros((0, len(g)))
    if metric == PART_MEAN:
        if p.ndim != 3:
            raise DimensionMismatch("part-mean distance needs (N, parts, E) signatures")
        return np.stack([np.sqrt(((g - row) ** 2).sum(axis=2)).mean(axis=1) for row in p]) if len(p) \
            else np.zeros((0, len(g)))
    raise ValueError(f"unknown metric {metric!r}")


def rank_retrieval(probe_sigs: np.ndarray, gallery_sigs: np.ndarray, gallery_subjects: Sequence[str],
                   k: int, probe_subjects: Sequence[str], metric: str = FLAT) -> np.ndarray:
    """Hit iff one of the ``k`` nearest gallery videos shares the probe's subject.

    Ties go to the lower gallery index.
    """
    if len(gallery_sigs) != len(gallery_subjects) or len(probe_sigs) != len(probe_subjects):
        raise DimensionMismatch("signature and subject lists differ in length")
    dist = pairwise_distances(probe_sigs, gallery_sigs, metric)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    gallery_subjects = np.asarray(gallery_subjects)
    return np.array([(gallery_subjects[o] == s).any() for o, s in zip(order, probe_subjects)], dtype=bool)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

@dataclass
class EvalProtocol:
    gallery: list[tuple[str, str]]
    probes: list[tuple]  # (video_id, subject_id, condition) or with (start, end) appended
    ranks: tuple[int, ...] = DEFAULT_RANKS
    num_runs: int = 10
    gallery_occlusion_classes: tuple[int, ...] = tuple(sorted(ALL_CLASSES))
    probe_occlusion_classes: tuple[int, ...] = tuple(sorted(ALL_CLASSES))
    rng_seed: int = 0
    probe_only: bool = False
    occlusion_kind: str = CONSISTENT  # probes only; the gallery always uses consistent occlusion
    metric: str = FLAT

    def __post_init__(self):
        self.gallery = [tuple(g) for g in self.gallery]
        self.probes = [tuple(p) if len(p) == 5 else (*p[:3], None, None) for p in self.probes]
        self.ranks = tuple(sorted(int(k) for k in self.ranks))
        self.gallery_occlusion_classes = tuple(sorted(self.gallery_occlusion_classes))
        self.probe_occlusion_classes = tuple(sorted(self.probe_occlusion_classes))
        gallery_ids = {g[0] for g in self.gallery}
        if gallery_ids & {p[0] for p in self.probes}:
            raise BadSpec("gallery and probe videos must be disjoint")
        missing = {p[1] for p in self.probes} - {g[1] for g in self.gallery}
        if missing:
            raise BadSpec(f"probe subjects absent from the gallery: {sorted(missing)}")
        if self.num_runs < 1 or not self.ranks or self.ranks[0] < 1:
            raise BadSpec("num_runs and every K must be >= 1")
        if self.occlusion_kind not in (CONSISTENT, DYNAMIC):
            raise BadSpec(f"unknown occlusion kind {self.occlusion_kind!r}")

    @property
    def conditions(self) -> list[str]:
        return sorted({p[2] for p in self.probes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gallery"] = [list(g) for g in self.gallery]
        d["probes"] = [list(p) for p in self.probes]
        for key in ("ranks", "gallery_occlusion_classes", "probe_occlusion_classes"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dataset(cls, dataset: SilhouetteDataset, split: str = "test", **kwargs) -> "EvalProtocol":
        roles = dataset.metadata["roles"]
        conditions = dataset.metadata.get("conditions", {})
        subjects = set(dataset.split_subjects(split))
        gallery, probes = [], []
        for video in sorted(dataset, key=lambda v: v.video_id):
            if video.subject_id not in subjects:
                continue
            if roles[video.video_id] == "gallery":
                gallery.append((video.video_id, video.subject_id))
            else:
                probes.append((video.video_id, video.subject_id,
                               conditions.get(video.video_id) or video.condition or "probe"))
        return cls(gallery, probes, **kwargs)


def write_protocol_csv(path: Path, protocol: EvalProtocol) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROTOCOL_FIELDS)
        for vid, sid in protocol.gallery:
            w.writerow(["gallery", vid, sid, "", "", ""])
        for vid, sid, cond, start, end in protocol.probes:
            w.writerow(["probe", vid, sid, cond, "" if start is None else start, "" if end is None else end])


def read_protocol_csv(path: Path, **kwargs) -> EvalProtocol:
    gallery, probes = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["role"] == "gallery":
                gallery.append((row["video_id"], row["subject_id"]))
            elif row["role"] == "probe":
                start = int(row["start"]) if row.get("start") else None
                end = int(row["end"]) if row.get("end") else None
                probes.append((row["video_id"], row["subject_id"], row["condition"] or "probe", start, end))
            else:
                raise BadSpec(f"unknown role {row['role']!r}")
    return EvalProtocol(gallery, probes, **kwargs)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_run: dict[str, dict[str, list[float]]]  # condition -> str(K) -> one value per run
    config: dict = field(default_factory=dict)
    manifests: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def mean(self) -> dict[str, dict[str, float]]:
        return {c: {k: float(np.mean(v)) for k, v in ks.items()} for c, ks in self.per_run.items()}

    @property
    def std(self) -> dict[str, dict[str, float]]:
        return {c: {k: float(np.std(v)) for k, v in ks.items()} for c, ks in self.per_run.items()}

    def rank(self, k: int, condition: str = ALL_CONDITIONS) -> float:
        return self.mean[condition][str(k)]

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config, "per_run": self.per_run,
                "mean": self.mean, "std": self.std, "manifests": self.manifests}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["per_run"], d.get("config", {}), d.get("manifests", []), d["schema_version"])

    def csv_rows(self) -> list[list]:
        ranks = sorted({int(k) for ks in self.per_run.values() for k in ks})
        rows = [["condition", *[f"rank{k}_{stat}" for k in ranks for stat in ("mean", "std")]]]
        mean, std = self.mean, self.std
        for cond in sorted(self.per_run):
            rows.append([cond, *[f"{v:.6f}" for k in ranks for v in (mean[cond][str(k)], std[cond][str(k)])]])
        return rows

    def write(self, json_path: Path, csv_path: Path | None = None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerows(self.csv_rows())


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _run_specs(protocol: EvalProtocol, seed: int) -> dict[str, OcclusionSpec]:
    specs = {}
    for vid, _ in protocol.gallery:
        classes = (0,) if protocol.probe_only else protocol.gallery_occlusion_classes
        specs[vid] = sample_spec(classes, derive_seed(seed, "gallery", vid))
    for vid, *_ in protocol.probes:
        if vid in specs:
            continue
        if protocol.occlusion_kind == DYNAMIC:
            specs[vid] = sample_dynamic_spec(derive_seed(seed, "probe-dynamic", vid))
        else:
            specs[vid] = sample_spec(protocol.probe_occlusion_classes, derive_seed(seed, "probe", vid))
    return specs


def run_protocol(model: OcclusionAwareModel, detector: OcclusionDetector | None, dataset,
                 protocol: EvalProtocol, manifest_dir: Path | None = None,
                 replay_dir: Path | None = None, beta_cache: BetaCache | None = None) -> EvalReport:
    """Embed occluded gallery and probes for every run; rank-K accuracy per condition."""
    needed = [g[0] for g in protocol.gallery] + [p[0] for p in protocol.probes]
    absent = sorted({v for v in needed if v not in dataset})
    if absent:
        raise MissingVideo(f"protocol videos not in dataset: {absent[:5]}")
    if model.needs_beta:
        detector = detector if detector is not None else model.detector
        if beta_cache is None:
            beta_cache = BetaCache(detector)
    gallery_subjects = [g[1] for g in protocol.gallery]
    probe_subjects = [p[1] for p in protocol.probes]
    conditions = [p[2] for p in protocol.probes]
    cond_names = [ALL_CONDITIONS, *protocol.conditions]
    per_run = {c: {str(k): [] for k in protocol.ranks} for c in cond_names}
    manifests = []

    for r in range(protocol.num_runs):
        if replay_dir is not None:
            path = Path(replay_dir) / f"run_{r:02d}.csv"
            if not path.exists():
                raise MissingVideo(f"no manifest for run {r} in {replay_dir}")
            specs = dict(read_manifest(path))
        else:
            specs = _run_specs(protocol, protocol.rng_seed + r)
        if manifest_dir is not None:
            Path(manifest_dir).mkdir(parents=True, exist_ok=True)
            path = Path(manifest_dir) / f"run_{r:02d}.csv"
            write_manifest(path, sorted(specs.items()))
            manifests.append(str(path))

        items = [(vid, None, None) for vid, _ in protocol.gallery] + \
                [(vid, start, end) for vid, _, _, start, end in protocol.probes]
        pixels, betas = [], []
        for vid, start, end in items:
            if vid not in specs:
                raise MissingVideo(f"manifest lacks {vid}")
            video = dataset[vid].window(start, end)
            occ = occlude_pixels(video.pixels, specs[vid])
            pixels.append(occ)
            betas.append(beta_cache.get(f"{vid}[{start}:{end}]", specs[vid], occ)
                         if beta_cache is not None else None)
        sigs = embed_videos(model, pixels, betas)
        g_sigs, p_sigs = sigs[:len(protocol.gallery)], sigs[len(protocol.gallery):]
        for k in protocol.ranks:
            hits = rank_retrieval(p_sigs, g_sigs, gallery_subjects, k, probe_subjects, protocol.metric)
            per_run[ALL_CONDITIONS][str(k)].append(float(hits.mean()) if len(hits) else 0.0)
            for c in protocol.conditions:
                mask = np.array([x == c for x in conditions])
                per_run[c][str(k)].append(float(hits[mask].mean()))

    config = {"protocol": protocol.to_dict(), "variant": model.variant,
              "replayed_from": str(replay_dir) if replay_dir is not None else None}
    return EvalReport(per_run, config, manifests)


def sliced_eval(model, detector, dataset, protocol: EvalProtocol,
                class_subsets: Sequence[Iterable[int]] = (CORNER, HALF_HORIZONTAL, HALF_VERTICAL),
                manifest_dir: Path | None = None, beta_cache: BetaCache | None = None) -> list[dict]:
    """One row per subset with gallery and probes restricted to that subset."""
    rows = []
    for i, subset in enumerate(class_subsets):
        subset = tuple(sorted(subset))
        if not set(subset) <= set(ALL_CLASSES):
            raise BadSpec(f"classes {subset} out of range")
        p = replace(protocol, gallery_occlusion_classes=subset, probe_occlusion_classes=subset)
        sub_dir = Path(manifest_dir) / f"slice_{i}" if manifest_dir is not None else None
        report = run_protocol(model, detector, dataset, p, sub_dir, beta_cache=beta_cache)
        rows.append({"classes": list(subset), "report": report})
    return rows


def cross_occlusion_eval(model, detector, dataset, protocol: EvalProtocol,
                         manifest_dir: Path | None = None, beta_cache: BetaCache | None = None) -> list[dict]:
    """Corner-occluded gallery against half-horizontal, then half-vertical probes."""
    rows = []
    for i, probe_classes in enumerate((HALF_HORIZONTAL, HALF_VERTICAL)):
        p = replace(protocol, gallery_occlusion_classes=CORNER, probe_occlusion_classes=probe_classes,
                    probe_only=False)
        sub_dir = Path(manifest_dir) / f"cross_{i}" if manifest_dir is not None else None
        report = run_protocol(model, detector, dataset, p, sub_dir, beta_cache=beta_cache)
        rows.append({"gallery_classes": list(CORNER), "probe_classes": list(probe_classes),
                     "report": report})
    return rows


def table_rows(rows: list[dict], ranks: Sequence[int] = DEFAULT_RANKS) -> list[list]:
    """Flatten sliced / cross-occlusion results into a printable table."""
    out = []
    for row in rows:
        label = {k: v for k, v in row.items() if k != "report"}
        report = row["report"]
        out.append([json.dumps(label, sort_keys=True),
                    *[f"{report.rank(k):.4f}±{report.std[ALL_CONDITIONS][str(k)]:.4f}"
                      for k in ranks if str(k) in report.per_run[ALL_CONDITIONS]]])
    return out


def detector_cross_domain(make_detector: Callable[[], OcclusionDetector],
                          domains: Mapping[str, tuple[Sequence, Sequence]],
                          train_config: DetectorTrainConfig | None = None, seed: int = 0, draws: int = 1,
                          trained: Mapping[str, OcclusionDetector] | None = None) -> dict:
    """Train one detector per domain; accuracy[i][j] = detector of domain i on test data of j."""
    names = list(domains)
    nets = dict(trained or {})
    for name in names:
        if name not in nets:
            net, _ = train_detector(make_detector(), domains[name][0], train_config)
            nets[name] = freeze(net)
    matrix = [[evaluate_detector(nets[a], domains[b][1], seed=seed, draws=draws)["accuracy"]
               for b in names] for a in names]
    return {"domains": names, "accuracy": matrix, "seed": seed, "draws": draws}
