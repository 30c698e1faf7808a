"""Ablation runs on the synthetic genre/star confound benchmark."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, SyntheticConfig, SyntheticTruth, generate_synthetic, split_by_item
from .encoders import Hyperparams, ModelParams
from .evaluation import RankingMetrics, distance_report, evaluate
from .training import RunHistory, train

log = logging.getLogger(__name__)


def ablation_hyperparams(**overrides) -> Hyperparams:
    """Desk-scale settings used for the synthetic ablation."""
    base = dict(d=32, h=64, lr=3e-3, batch_size=64, n_pos=5, n_neg=20, epochs=20, patience=None, l2=1e-4)
    base.update(overrides)
    return Hyperparams(**base)


def ablation_synthetic(**overrides) -> SyntheticConfig:
    """Synthetic world for the ablation: sparse enough that co-occurrence matters."""
    base = dict(n_genres=12, n_stars=6, keep_rate=0.12)
    base.update(overrides)
    return SyntheticConfig(**base)


@dataclass
class AblationConfig:
    synthetic: SyntheticConfig = field(default_factory=ablation_synthetic)
    hyper: Hyperparams = field(default_factory=ablation_hyperparams)
    variants: tuple[str, ...] = ("full", "no-contrastive")
    ks: tuple[int, ...] = (5, 10, 20)
    distance_users: int = 20
    pairs_per_user: int = 5


@dataclass
class VariantRun:
    variant: str
    metrics: RankingMetrics
    distance_gap: float
    history: RunHistory
    params: ModelParams


@dataclass
class SeedRun:
    seed: int
    runs: dict[str, VariantRun]

    def ndcg(self, variant: str, k: int = 10) -> float:
        return self.runs[variant].metrics.ndcg[k]


def sample_distance_pairs(
    ds: InteractionDataset, truth: SyntheticTruth, train: InteractionDataset, n_users: int, per_user: int, rng
):
    """Pairs (positive, same-genre truly disliked item) for users with enough positives.

    Positives are items the user interacted with; the negative shares the
    positive's genre but carries a star the user dislikes.  Only users with
    training interactions qualify, since the others have no UCE.
    """
    pref = truth.preference
    picked = []
    for u in rng.permutation(ds.n_users):
        seen = ds.items_of_user(u)
        if len(seen) < per_user or len(train.items_of_user(u)) == 0:
            continue
        pos = rng.choice(seen, per_user, replace=False)
        negs = []
        for v in pos:
            cands = np.flatnonzero((truth.genre == truth.genre[v]) & ~pref[u])
            if len(cands) == 0:
                break
            negs.append(int(rng.choice(cands)))
        if len(negs) < per_user:
            continue
        picked.append((int(u), [int(v) for v in pos], negs))
        if len(picked) == n_users:
            break
    if len(picked) < n_users:
        raise ValueError(f"only {len(picked)} users qualify for distance pairs")
    return picked


def run_seed(seed: int, config: AblationConfig) -> SeedRun:
    syn = dataclasses.replace(config.synthetic, seed=seed)
    ds, truth = generate_synthetic(syn)
    bundle = split_by_item(ds, seed=seed)
    pairs = sample_distance_pairs(ds, truth, bundle.train, config.distance_users, config.pairs_per_user, np.random.default_rng([seed, 17]))
    hyper = dataclasses.replace(config.hyper, seed=seed)
    runs = {}
    for variant in config.variants:
        params, history = train(bundle, hyper, variant)
        metrics = evaluate(bundle.test, bundle.train, params, config.ks, hyper.leaky_slope, hyper.mean_pool)
        gaps = []
        for u, pos, neg in pairs:
            rows = distance_report(u, pos, neg, params, ds.attributes, bundle.train, hyper.leaky_slope, hyper.mean_pool)
            gaps.append(np.mean([r.diff for r in rows]))
        runs[variant] = VariantRun(variant, metrics, float(np.mean(gaps)), history, params)
        log.info("seed %d %s ndcg@10=%.4f gap=%.4f", seed, variant, metrics.ndcg[10], runs[variant].distance_gap)
    return SeedRun(seed, runs)


def run_ablation(seeds, config: AblationConfig | None = None) -> list[SeedRun]:
    config = config or AblationConfig()
    return [run_seed(s, config) for s in seeds]


def summarize(results: list[SeedRun], a: str = "full", b: str = "no-contrastive", k: int = 10) -> dict:
    diffs = np.array([r.ndcg(a, k) - r.ndcg(b, k) for r in results])
    return {
        "wins": int(np.sum(diffs >= 0)),
        "seeds": len(results),
        "mean_improvement": float(diffs.mean()),
        f"mean_ndcg@{k}_{a}": float(np.mean([r.ndcg(a, k) for r in results])),
        f"mean_ndcg@{k}_{b}": float(np.mean([r.ndcg(b, k) for r in results])),
        f"distance_gap_{a}": float(np.mean([r.runs[a].distance_gap for r in results])),
        f"distance_gap_{b}": float(np.mean([r.runs[b].distance_gap for r in results])),
    }
