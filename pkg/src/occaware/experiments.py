"""Desk-scale comparison of baselines and aware variants on walker data."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import torch

from .backbone import BackboneConfig
from .data_model import SilhouetteDataset
from .detector import OcclusionDetector
from .evaluation import DYNAMIC, EvalProtocol, run_protocol
from .model import NO_VARIANT, BetaCache, build_model, estimate_beta_scale
from .occlusion import ALL_CLASSES, derive_seed
from .training import TrainConfig, train_occluded
from .walker import DatasetPlan, generate_dataset

logger = logging.getLogger(__name__)

BASELINE_1, BASELINE_2 = "baseline-1", "baseline-2"


@dataclass
class ComparisonPlan:
    num_subjects: int = 60
    num_test_subjects: int = 20
    seqs_per_subject: int = 3
    frames_per_seq: int = 60
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_subjects=8, clips_per_subject=4, max_steps=1000, eval_every=0, val_fraction=0.0,
        steps_per_epoch=200))
    backbone: BackboneConfig = field(default_factory=BackboneConfig.compact)
    eval_runs: int = 5
    dynamic_eval: bool = False
    normalize_beta: bool = True  # rescale beta to unit mean norm (see estimate_beta_scale)


def model_specs(variants) -> dict[str, tuple[str, tuple[int, ...]]]:
    """Experiment name -> (injector variant, training occlusion classes)."""
    specs = {}
    for name in variants:
        if name == BASELINE_1:
            specs[name] = (NO_VARIANT, (0,))
        elif name == BASELINE_2:
            specs[name] = (NO_VARIANT, tuple(sorted(ALL_CLASSES)))
        else:
            specs[name] = (name, tuple(sorted(ALL_CLASSES)))
    return specs


def compare_models(detector: OcclusionDetector, seed: int, variants=(BASELINE_1, BASELINE_2, "deferred-concat"),
                   plan: ComparisonPlan | None = None, dataset: SilhouetteDataset | None = None) -> dict:
    """Train every named model on the same data and seed; mean rank-1 on occluded test data."""
    plan = plan or ComparisonPlan()
    if dataset is None:
        dataset = generate_dataset(DatasetPlan(plan.num_subjects, plan.seqs_per_subject,
                                               plan.frames_per_seq, rng_seed=derive_seed("walkers", seed),
                                               num_test_subjects=plan.num_test_subjects))
    train_videos = [v for v in dataset if dataset.metadata["splits"][v.subject_id] == "train"]
    cache = BetaCache(detector)
    protocol = EvalProtocol.from_dataset(dataset, num_runs=plan.eval_runs, rng_seed=derive_seed("eval", seed))
    scale = estimate_beta_scale(detector, train_videos, seed=seed, cache=cache) if plan.normalize_beta else 1.0
    results = {}
    for name, (variant, classes) in model_specs(variants).items():
        torch.manual_seed(seed)
        model = build_model(variant, plan.backbone, detector, seed=derive_seed("model", seed), beta_scale=scale)
        cfg = replace(plan.train, rng_seed=derive_seed("train", seed), occlusion_classes=classes)
        res = train_occluded(model, detector, train_videos, cfg, beta_cache=cache)
        report = run_protocol(model, detector, dataset, protocol, beta_cache=cache)
        entry = {"rank1": report.rank(1), "report": report.to_dict(),
                 "final_loss_triplet": res.log[-1]["loss_triplet"]}
        if plan.dynamic_eval:
            dyn = run_protocol(model, detector, dataset, replace(protocol, occlusion_kind=DYNAMIC),
                               beta_cache=cache)
            entry["dynamic_rank1"] = dyn.rank(1)
        results[name] = entry
        logger.info("seed %d %s rank1 %.4f", seed, name, entry["rank1"])
    return {"seed": seed, "beta_scale": scale,
            "plan": {"train": asdict(plan.train), "backbone": asdict(plan.backbone), "eval_runs": plan.eval_runs,
                     "normalize_beta": plan.normalize_beta}, "models": results}
