"""Majority-vote inference over ensemble members and the four report metrics.

Class-centric: per attribute, the mean of the true-positive rate and the
true-negative rate over the test set ("balanced accuracy"); the headline
number is the mean over attributes with both classes present in the ground
truth. Instance-centric: per-image set precision and recall, averaged over
images, with F1 computed from the two aggregate means.

Edge rules: an image with an empty prediction set counts precision 1
(vacuous), an image with empty ground truth counts recall 1; attributes
whose ground-truth column is single-class have undefined balanced accuracy
and are excluded from the mean. All three situations are reported through
the module logger.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as jmodel
from .context import ExemplarIndex, knn, max_fuse
from .data import Sample, sequence_to_labels
from .errors import ContractError, DataFileError
from .numerics import Array
from .training import encode_context_vectors, read_manifest

log = logging.getLogger(__name__)


def vote(members: list[Array]) -> Array:
    """Per-attribute majority vote; strict majority required, ties go to 0."""
    if len(members) == 0:
        raise ContractError("vote: needs at least one member prediction")
    stacked = np.asarray(members)
    if stacked.ndim != 2:
        raise ContractError("vote: member predictions must share one length")
    counts = stacked.sum(axis=0)
    return (counts * 2 > stacked.shape[0]).astype(np.int64)


def map_cls(preds: Array, gts: Array) -> tuple[float, list[float | None]]:
    """Mean balanced accuracy over attributes; per-attribute values included.

    Returns (mAP, per_attribute); attributes with single-class ground truth
    get None and are excluded from the mean.
    """
    preds, gts = _aligned(preds, gts)
    per_attr: list[float | None] = []
    defined = []
    for j in range(gts.shape[1]):
        gt = gts[:, j]
        pr = preds[:, j]
        pos = gt == 1
        neg = gt == 0
        if not pos.any() or not neg.any():
            per_attr.append(None)
            continue
        tpr = float((pr[pos] == 1).mean())
        tnr = float((pr[neg] == 0).mean())
        ap = 0.5 * (tpr + tnr)
        per_attr.append(ap)
        defined.append(ap)
    if not defined:
        raise ContractError("map_cls: every attribute has single-class ground truth")
    undefined = sum(1 for v in per_attr if v is None)
    if undefined:
        log.warning("map_cls: %d attribute(s) excluded (single-class ground truth)", undefined)
    return float(np.mean(defined)), per_attr


def instance_metrics(preds: Array, gts: Array) -> tuple[float, float, float]:
    """Per-image precision/recall means and the F1 of those means."""
    preds, gts = _aligned(preds, gts)
    precisions = np.empty(len(preds))
    recalls = np.empty(len(preds))
    empty_pred = empty_gt = 0
    for i in range(len(preds)):
        inter = float(np.sum((preds[i] == 1) & (gts[i] == 1)))
        n_pred = float(preds[i].sum())
        n_gt = float(gts[i].sum())
        if n_pred == 0:
            precisions[i] = 1.0
            empty_pred += 1
        else:
            precisions[i] = inter / n_pred
        if n_gt == 0:
            recalls[i] = 1.0
            empty_gt += 1
        else:
            recalls[i] = inter / n_gt
    if empty_pred or empty_gt:
        log.info("instance_metrics: %d empty prediction(s), %d empty ground truth(s) "
                 "scored by convention", empty_pred, empty_gt)
    mprc = float(precisions.mean())
    mrcl = float(recalls.mean())
    f1 = 0.0 if mprc + mrcl == 0 else 2.0 * mprc * mrcl / (mprc + mrcl)
    return mprc, mrcl, f1


def _aligned(preds, gts) -> tuple[Array, Array]:
    preds = np.atleast_2d(np.asarray(preds))
    gts = np.atleast_2d(np.asarray(gts))
    if preds.shape != gts.shape:
        raise ContractError(f"metrics: prediction shape {preds.shape} vs ground truth {gts.shape}")
    return preds, gts


@dataclass
class MetricsReport:
    mAP_cls: float
    mPrc_ins: float
    mRcl_ins: float
    F1_ins: float
    per_attribute_ap: list[float | None]

    def values(self) -> tuple[float, float, float, float]:
        return (self.mAP_cls, self.mPrc_ins, self.mRcl_ins, self.F1_ins)

    def to_dict(self) -> dict:
        return {
            "mAP_cls": self.mAP_cls,
            "mPrc_ins": self.mPrc_ins,
            "mRcl_ins": self.mRcl_ins,
            "F1_ins": self.F1_ins,
            "per_attribute_ap": self.per_attribute_ap,
        }


def compute_report(preds: Array, gts: Array) -> MetricsReport:
    mean_ap, per_attr = map_cls(preds, gts)
    mprc, mrcl, f1 = instance_metrics(preds, gts)
    return MetricsReport(mAP_cls=mean_ap, mPrc_ins=mprc, mRcl_ins=mrcl, F1_ins=f1,
                         per_attribute_ap=per_attr)


# ---------------------------------------------------------------------------
# running trained members


class MemberRuntime:
    """A loaded member plus the exemplar cache it needs for inference.

    The exemplar pool is the training split; its context vectors are encoded
    once with this member's encoder. Test images are searched against the
    pool with no exclusion.
    """

    def __init__(self, params: jmodel.ModelParams, config: jmodel.ModelConfig,
                 meta: dict | None = None, pool_samples: list[Sample] | None = None):
        self.params = params
        self.config = config
        self.meta = meta or {}
        self._index = None
        self._pool_zs = None
        self._pool_pos = None
        if config.context_enabled and config.k > 0:
            if pool_samples is None:
                raise ContractError(
                    "MemberRuntime: the model uses exemplar context; a training pool is required")
            self._index = ExemplarIndex(ids=[s.id for s in pool_samples],
                                        features=np.stack([s.global_feature for s in pool_samples]))
            self._pool_zs = encode_context_vectors(params, config, pool_samples)
            self._pool_pos = {s.id: i for i, s in enumerate(pool_samples)}

    @classmethod
    def load(cls, checkpoint_path: str | Path,
             pool_samples: list[Sample] | None = None) -> "MemberRuntime":
        params, config, meta = jmodel.load_checkpoint_with_meta(checkpoint_path)
        return cls(params, config, meta, pool_samples)

    def _exemplar_zs(self, sample: Sample) -> list[Array]:
        if self._index is None:
            return []
        ids = knn(self._index, sample.global_feature, self.config.k)
        return [self._pool_zs[self._pool_pos[i]] for i in ids]

    def predict(self, sample: Sample, collect_attention: bool = False):
        """Greedy-decode one sample; returns (labels, sequence, attention|None)."""
        enc = jmodel.encode(self.params, self.config, sample.regions)
        z_star, _ = max_fuse(enc.z, self._exemplar_zs(sample))
        seq, att = jmodel.decode_greedy(self.params, self.config, enc.H, enc.z, z_star,
                                        collect_attention=collect_attention)
        return sequence_to_labels(seq, self.config.n_attr), seq, att

    def predict_all(self, samples: list[Sample]) -> Array:
        return np.stack([self.predict(s)[0] for s in samples])


@dataclass
class EnsembleReport:
    voted: MetricsReport
    members: list[MetricsReport]
    member_labels: list[str]
    member_average: dict[str, float]
    voted_predictions: Array
    member_predictions: Array  # (n_members x n_images x n_attr)

    def to_dict(self) -> dict:
        return {
            "ensemble": self.voted.to_dict(),
            "member_average": self.member_average,
            "members": [
                {"label": label, **report.to_dict()}
                for label, report in zip(self.member_labels, self.members)
            ],
        }


def evaluate_members(runtimes: list[MemberRuntime], labels: list[str],
                     test_samples: list[Sample]) -> EnsembleReport:
    """Decode every member on every image, vote, and compute all metrics."""
    gts = np.stack([s.labels for s in test_samples])
    member_preds = np.stack([rt.predict_all(test_samples) for rt in runtimes])
    voted = np.stack([vote(list(member_preds[:, i])) for i in range(len(test_samples))])
    member_reports = [compute_report(member_preds[i], gts) for i in range(len(runtimes))]
    voted_report = compute_report(voted, gts)
    metric_names = ("mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins")
    member_average = {
        name: float(np.mean([getattr(r, name) for r in member_reports]))
        for name in metric_names
    }
    return EnsembleReport(voted=voted_report, members=member_reports, member_labels=labels,
                          member_average=member_average, voted_predictions=voted,
                          member_predictions=member_preds)


def evaluate_ensemble(manifest: dict | str | Path, test_samples: list[Sample],
                      train_samples: list[Sample] | None = None,
                      manifest_dir: str | Path | None = None) -> EnsembleReport:
    """Evaluate every member listed in a manifest and the voted ensemble."""
    if not isinstance(manifest, dict):
        manifest_dir = Path(manifest).parent
        manifest = read_manifest(manifest)
    runtimes = []
    labels = []
    for entry in manifest["members"]:
        if entry.get("status") != "ok":
            raise DataFileError(f"manifest member {entry.get('index')} is not usable: "
                                f"{entry.get('status')}")
        ckpt = Path(entry["checkpoint"])
        if manifest_dir is not None and not ckpt.is_absolute():
            ckpt = Path(manifest_dir) / ckpt
        runtimes.append(MemberRuntime.load(ckpt, pool_samples=train_samples))
        seed = entry.get("order_seed")
        labels.append(entry["kind"] if seed is None else f"{entry['kind']}({seed})")
    return evaluate_members(runtimes, labels, test_samples)


def format_report_table(rows: list[tuple[str, tuple[float, float, float, float]]]) -> str:
    """Aligned text table of the four metrics, values in percent."""
    headers = ("", "mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins")
    label_w = max(len(headers[0]), *(len(label) for label, _ in rows))
    col_w = max(len(h) for h in headers[1:])
    lines = [headers[0].ljust(label_w) + "".join(h.rjust(col_w + 2) for h in headers[1:])]
    for label, values in rows:
        cells = "".join(f"{100.0 * v:.2f}".rjust(col_w + 2) for v in values)
        lines.append(label.ljust(label_w) + cells)
    return "\n".join(lines) + "\n"
