"""The four-variant ablation battery and the training-size robustness sweep.

Ablations compare the full configuration against one disabled component at
a time, with matched seeds:

  attribute_context   recurrent encoder vs. a trained linear projection of
                      the region features (the decoder sees the mean)
  similarity_context  exemplar fusion with the configured k vs. k = 0
  ensemble            the voted 10-member ensemble vs. the members' average
  attention           per-step attended context vs. the constant summary

The robustness sweep retrains the full single model on nested subsets of
the training split (100/75/50/25 percent by default) and reports the four
metrics per subset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from . import model as jmodel
from .data import AttributeVocab, Sample, build_orders
from .evaluation import (EnsembleReport, MemberRuntime, evaluate_ensemble,
                         evaluate_members)
from .numerics import Rng
from .training import EnsembleSpec, TrainConfig, train_ensemble, train_member

METRIC_NAMES = ("mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins")


@dataclass
class AblationRow:
    name: str
    full: dict[str, float]
    ablated: dict[str, float]

    @property
    def delta(self) -> dict[str, float]:
        return {k: self.full[k] - self.ablated[k] for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {"name": self.name, "full": self.full, "ablated": self.ablated,
                "delta": self.delta}


def _single_metrics(train_samples, test_samples, vocab, order, train_config,
                    model_config) -> dict[str, float]:
    result = train_member(train_samples, vocab, order, train_config, model_config)
    pool = train_samples if (model_config.context_enabled and model_config.k > 0) else None
    runtime = MemberRuntime(result.params, model_config, pool_samples=pool)
    report = evaluate_members([runtime], [order.label()], test_samples).voted
    return dict(zip(METRIC_NAMES, report.values()))


def run_ablations(train_samples: list[Sample], test_samples: list[Sample],
                  vocab: AttributeVocab, model_config: jmodel.ModelConfig,
                  train_config: TrainConfig, out_dir, workers: int = 1) -> list[AblationRow]:
    """Train the variant battery and return one row per ablation."""
    order = build_orders(vocab, base_seed=train_config.seed)[0]  # rare_first

    full = _single_metrics(train_samples, test_samples, vocab, order, train_config, model_config)
    no_encoder = _single_metrics(train_samples, test_samples, vocab, order, train_config,
                                 replace(model_config, encoder_enabled=False))
    no_context = _single_metrics(train_samples, test_samples, vocab, order, train_config,
                                 replace(model_config, context_enabled=False, k=0))
    no_attention = _single_metrics(train_samples, test_samples, vocab, order, train_config,
                                   replace(model_config, attention_enabled=False))

    spec = EnsembleSpec.standard(vocab, base_seed=train_config.seed)
    train_ensemble(train_samples, vocab, spec, train_config, model_config,
                   out_dir=out_dir, workers=workers)
    ensemble_report = _evaluate_dir(out_dir, test_samples, train_samples)
    voted = dict(zip(METRIC_NAMES, ensemble_report.voted.values()))

    return [
        AblationRow("attribute_context", full, no_encoder),
        AblationRow("similarity_context", full, no_context),
        AblationRow("ensemble", voted, dict(ensemble_report.member_average)),
        AblationRow("attention", full, no_attention),
    ]


def _evaluate_dir(out_dir, test_samples, train_samples) -> EnsembleReport:
    return evaluate_ensemble(Path(out_dir) / "manifest.json", test_samples, train_samples)


@dataclass
class RobustnessRow:
    percent: int
    n_train: int
    metrics: dict[str, float]

    def to_dict(self) -> dict:
        return {"percent": self.percent, "n_train": self.n_train, **self.metrics}


def run_robustness(train_samples: list[Sample], test_samples: list[Sample],
                   vocab: AttributeVocab, model_config: jmodel.ModelConfig,
                   train_config: TrainConfig,
                   percents: tuple[int, ...] = (100, 75, 50, 25)) -> list[RobustnessRow]:
    """Retrain on nested random subsets of the training split, evaluate each."""
    shuffle = Rng(train_config.seed).permutation(len(train_samples))
    order = build_orders(vocab, base_seed=train_config.seed)[0]
    rows = []
    for pct in percents:
        n = max(1, int(round(len(train_samples) * pct / 100.0)))
        subset = [train_samples[i] for i in shuffle[:n]]
        metrics = _single_metrics(subset, test_samples, vocab, order, train_config, model_config)
        rows.append(RobustnessRow(percent=pct, n_train=n, metrics=metrics))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    header = ["ablation"]
    for group in ("full", "ablated", "delta"):
        header.extend(f"{group}_{m}" for m in METRIC_NAMES)
    lines = [",".join(header)]
    for row in rows:
        cells = [row.name]
        for group in (row.full, row.ablated, row.delta):
            cells.extend(f"{group[m]:.6f}" for m in METRIC_NAMES)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def robustness_csv(rows: list[RobustnessRow]) -> str:
    header = ["percent", "n_train", *METRIC_NAMES]
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row.percent), str(row.n_train)]
        cells.extend(f"{row.metrics[m]:.6f}" for m in METRIC_NAMES)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
