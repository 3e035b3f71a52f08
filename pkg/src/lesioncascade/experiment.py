"""Desk-scale training protocol and the component ablation.

Run ``python -m lesioncascade.experiment`` for the full table (about 12
training runs of 2-3 minutes each on one core).
"""

from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Sample, SynthConfig, generate_splits
from .model import CascadeNet, ModelConfig
from .train import TrainConfig, evaluate, train

__all__ = ["ABLATION", "RunResult", "run_protocol", "run_ablation", "ablation_trends", "mean_metrics"]

log = logging.getLogger(__name__)

# In a single-stage model the recalibrated features feed nothing, so
# "baseline + LPSE" and the one-stage full model are the same network; the
# ablation trains it once under the name "1-stage".  The smallest cascade in
# which DGFF-refined features reach a segmentation head has two stages.
ABLATION = {
    "baseline": ModelConfig(num_stages=1, pooling="gap", use_dgff=False),
    "baseline+DGFF": ModelConfig(num_stages=2, pooling="gap", use_dgff=True),
    "1-stage": ModelConfig(num_stages=1, pooling="lpse", use_dgff=True),
    "3-stage": ModelConfig(num_stages=3, pooling="lpse", use_dgff=True),
}
ALIASES = {"baseline+LPSE": "1-stage"}


@dataclass
class RunResult:
    name: str
    seed: int
    metrics: dict
    history: list = field(default_factory=list)
    seconds: float = 0.0


def run_protocol(
    model_config: ModelConfig,
    train_set: Sequence[Sample],
    test_set: Sequence[Sample],
    seed: int = 0,
    train_config: Optional[TrainConfig] = None,
    name: str = "",
) -> RunResult:
    """Train from scratch with ``seed`` (init, batch order, augmentation) and evaluate on ``test_set``."""
    cfg = train_config or TrainConfig()
    cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    start = time.perf_counter()
    model = CascadeNet(model_config, seed=seed)
    result = train(model, train_set, cfg, eval_samples=test_set)
    report = evaluate(model, test_set)
    return RunResult(name, seed, report.metrics, result.history, time.perf_counter() - start)


def run_ablation(
    seeds: Sequence[int] = (0, 1, 2),
    data_config: Optional[SynthConfig] = None,
    train_config: Optional[TrainConfig] = None,
    configs: Optional[dict] = None,
    progress: Optional[Callable[[RunResult], None]] = None,
) -> dict[str, list[RunResult]]:
    train_set, test_set = generate_splits(data_config or SynthConfig())
    results: dict[str, list[RunResult]] = {}
    for name, model_config in (configs or ABLATION).items():
        for seed in seeds:
            run = run_protocol(model_config, train_set, test_set, seed, train_config, name)
            results.setdefault(name, []).append(run)
            if progress is not None:
                progress(run)
    for alias, target in ALIASES.items():
        if target in results:
            results[alias] = results[target]
    return results


def mean_metrics(runs: Sequence[RunResult]) -> dict[str, float]:
    keys = runs[0].metrics.keys()
    return {k: float(np.mean([r.metrics[k] for r in runs])) for k in keys}


def ablation_trends(results: dict[str, list[RunResult]]) -> list[tuple[str, float, float, bool]]:
    """``(check, left, right, left >= right)`` for the three directional comparisons."""
    means = {name: mean_metrics(runs) for name, runs in results.items()}
    checks = [
        ("baseline+DGFF vs baseline, JA", means["baseline+DGFF"]["JA"], means["baseline"]["JA"]),
        ("baseline+LPSE vs baseline, AUC", means["baseline+LPSE"]["AUC"], means["baseline"]["AUC"]),
        ("3-stage vs 1-stage, JA", means["3-stage"]["JA"], means["1-stage"]["JA"]),
        ("3-stage vs 1-stage, AUC", means["3-stage"]["AUC"], means["1-stage"]["AUC"]),
    ]
    return [(label, a, b, a >= b) for label, a, b in checks]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="component ablation on the synthetic protocol")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--max-iters", type=int, default=TrainConfig.max_iterations)
    parser.add_argument("--warmup-iters", type=int, default=TrainConfig.warmup_iterations)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    tcfg = TrainConfig(max_iterations=args.max_iters, warmup_iterations=args.warmup_iters)

    def show(run: RunResult) -> None:
        m = run.metrics
        print(f"{run.name:14s} seed {run.seed}: JA {m['JA']:.4f} AUC {m['AUC']:.4f} ({run.seconds:.0f}s)", flush=True)

    results = run_ablation(args.seeds, train_config=tcfg, progress=show)
    print()
    for name, runs in results.items():
        m = mean_metrics(runs)
        print(f"{name:14s} mean JA {m['JA']:.4f}  DI {m['DI']:.4f}  AUC {m['AUC']:.4f}  AC_r {m['AC_r']:.4f}")
    print()
    for label, a, b, ok in ablation_trends(results):
        print(f"{'PASS' if ok else 'FAIL'}  {label}: {a:.4f} vs {b:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
