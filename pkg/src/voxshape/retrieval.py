"""Descriptor galleries, L2 ranking, top-k accuracy and the retrieval experiments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from voxshape import data
from voxshape.errors import ShapeError

TRANSFORMS = ("none", "similarity", "affine")
LOOKUPS = ("repeat_only", "expanded")
SOURCES = ("same_scan", "repeat_scan")

_QUERY_AUGMENT = {"similarity": data.QUERY_SIMILARITY, "affine": data.QUERY_AFFINE}


@dataclass
class DescriptorGallery:
    matrix: np.ndarray
    ids: np.ndarray
    classes: np.ndarray
    provenance: str = "original"

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        self.ids = np.asarray(self.ids)
        self.classes = np.asarray(self.classes) if self.classes is not None else np.full(len(self.ids), -1)
        if self.matrix.shape[0] != len(self.ids):
            raise ShapeError("gallery", f"{self.matrix.shape[0]} rows for {len(self.ids)} ids")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("gallery contains non-finite descriptors")


def extract_gallery(model, volumes, ids, classes=None, provenance: str = "original") -> DescriptorGallery:
    """Eval-mode descriptors of ``volumes``; raises NotTrainedError for an untrained normalizer."""
    return DescriptorGallery(model.describe(np.stack(list(volumes))), ids, classes, provenance)


def baseline_volume_descriptor(v: np.ndarray) -> np.ndarray:
    """Voxel count as a 1-vector; a naive comparator with no pose normalization."""
    return np.array([float(np.sum(v))])


def describe_baseline(volumes) -> np.ndarray:
    return np.stack([baseline_volume_descriptor(v) for v in volumes])


def rank_query(q: np.ndarray, g: DescriptorGallery) -> np.ndarray:
    """Gallery indices by ascending L2 distance; ties keep the lower index first."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != g.matrix.shape[1]:
        raise ShapeError("rank_query", f"query dim {q.shape[0]} vs gallery dim {g.matrix.shape[1]}")
    dist = np.sqrt(np.sum((g.matrix - q) ** 2, axis=1))
    return np.argsort(dist, kind="stable")


def topk_accuracy(queries: np.ndarray, true_ids, g: DescriptorGallery, k: int) -> float:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    true_ids = list(true_ids)
    missing = set(true_ids) - set(g.ids.tolist())
    if missing:
        raise KeyError(f"true ids not in gallery: {sorted(missing)}")
    hits = 0
    for q, tid in zip(queries, true_ids):
        order = rank_query(q, g)
        hits += int(tid in g.ids[order[:k]].tolist())
    return hits / len(true_ids)


@dataclass(frozen=True)
class ExperimentScenario:
    transform_type: str
    lookup_set: str
    query_source: str

    def __post_init__(self):
        if (self.transform_type not in TRANSFORMS or self.lookup_set not in LOOKUPS
                or self.query_source not in SOURCES):
            raise ValueError(f"invalid scenario {self}")
        if self.query_source == "same_scan" and self.lookup_set != "expanded":
            raise ValueError("same-scan queries are looked up among all test subjects (lookup 'expanded')")

    @property
    def name(self) -> str:
        if self.query_source == "same_scan":
            return f"same-{self.transform_type}"
        lookup = "repeat" if self.lookup_set == "repeat_only" else "expanded"
        return f"{lookup}-{self.transform_type}"


SCENARIOS = {
    s.name: s
    for s in [ExperimentScenario(t, "expanded", "same_scan") for t in TRANSFORMS]
    + [ExperimentScenario(t, lk, "repeat_scan") for lk in LOOKUPS for t in TRANSFORMS]
}
# the rows reported in the paper's results table (same-scan without a transform is trivial)
TABLE_SCENARIOS = ["same-similarity", "same-affine", "repeat-none", "repeat-similarity", "repeat-affine",
                   "expanded-none", "expanded-similarity", "expanded-affine"]


def get_scenario(name: str) -> ExperimentScenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; valid: {', '.join(SCENARIOS)}") from None


def build_queries(test_set: data.Dataset, scenario: ExperimentScenario, seed: int, draws: int):
    """Query volumes and their true subject ids for one scenario."""
    if scenario.query_source == "same_scan":
        ids = [r.subject_id for r in test_set.split("test")]
        base = {sid: test_set.volumes[sid] for sid in ids}
    else:
        ids = [sid for sid in data.repeat_subject_ids(test_set.rows) if sid in test_set.repeats]
        base = {sid: test_set.repeats[sid] for sid in ids}
    n_draws = 1 if scenario.transform_type == "none" else draws
    vols, true_ids = [], []
    for sid in ids:
        for d in range(n_draws):
            v = base[sid]
            if scenario.transform_type != "none":
                v = data.augment(v, _QUERY_AUGMENT[scenario.transform_type], np.random.default_rng([seed, sid, d]))
            vols.append(v)
            true_ids.append(sid)
    return vols, true_ids


def lookup_ids(test_set: data.Dataset, scenario: ExperimentScenario) -> list:
    if scenario.lookup_set == "repeat_only":
        return [sid for sid in data.repeat_subject_ids(test_set.rows) if sid in test_set.repeats]
    return [r.subject_id for r in test_set.split("test")]


def run_experiment(describe: Callable, test_set: data.Dataset, scenario: ExperimentScenario, seed: int = 0,
                   draws: int = 6, ks=(1, 5)) -> dict:
    """Top-k retrieval accuracy; ``describe`` maps a list of volumes to an [N, d] descriptor array."""
    gids = lookup_ids(test_set, scenario)
    classes = {r.subject_id: r.structure_class for r in test_set.rows}
    gallery = DescriptorGallery(describe([test_set.volumes[s] for s in gids]), gids, [classes[s] for s in gids])
    vols, true_ids = build_queries(test_set, scenario, seed, draws)
    queries = describe(vols)
    result = {"scenario": scenario.name, "n_queries": len(true_ids), "seed": seed}
    for k in ks:
        result[f"top{k}"] = topk_accuracy(queries, true_ids, gallery, k)
    return result


def model_describer(model) -> Callable:
    return lambda volumes: model.describe(np.stack(list(volumes)))


RESULTS_HEADER = "scenario,transform,lookup,k,accuracy,n_queries,seed"


def write_results(path, results, ks=(1, 5)) -> None:
    lines = [RESULTS_HEADER]
    for res in results:
        sc = SCENARIOS[res["scenario"]]
        for k in ks:
            lines.append(f"{sc.name},{sc.transform_type},{sc.lookup_set},{k},{res[f'top{k}']:.6f},"
                         f"{res['n_queries']},{res['seed']}")
    Path(path).write_text("\n".join(lines) + "\n")
