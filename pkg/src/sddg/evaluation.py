"""HTER metric, cross-domain evaluation, and dynamic-weight dumps."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

from .data import BatchLoader, LabeledDataset
from .model import SDDGNet

ATTACK = 1


def hter(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> tuple[float, float, float]:
    """(far, frr, hter) with "attack" predicted iff score >= threshold.

    far is the fraction of bonafide samples flagged as attack, frr the
    fraction of attacks accepted as bonafide.
    """
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    bona, attack = labels == 0, labels == ATTACK
    if not bona.any() or not attack.any():
        raise ValueError("HTER needs both bonafide and attack samples")
    pred_attack = scores >= threshold
    far = float(pred_attack[bona].mean())
    frr = float((~pred_attack[attack]).mean())
    return far, frr, (far + frr) / 2


@dataclass
class DomainRecord:
    domain: str
    far: float
    frr: float
    hter: float
    n: int
    threshold: float


@dataclass
class EvalReport:
    records: list[DomainRecord] = field(default_factory=list)
    average_hter: float = 0.0
    sanity: list[DomainRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([DomainRecord(**r) for r in d["records"]], d["average_hter"],
                   [DomainRecord(**r) for r in d.get("sanity", [])])


@torch.no_grad()
def predict(net: SDDGNet, ds: LabeledDataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Attack-class softmax scores and dynamic weights (empty if no block) in eval mode."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    scores, weights = [], []
    for x, _ in BatchLoader(ds, min(batch_size, len(ds)), train=False):
        logits, w = net(torch.from_numpy(np.ascontiguousarray(x)).to(dtype))
        scores.append(torch.softmax(logits, 1)[:, ATTACK].double().numpy())
        if w is not None:
            weights.append(w.double().numpy())
    net.train(was_training)
    return np.concatenate(scores), (np.concatenate(weights) if weights else np.empty((len(ds), 0)))


def evaluate_domain(net: SDDGNet, ds: LabeledDataset, threshold: float = 0.5) -> DomainRecord:
    scores, _ = predict(net, ds)
    far, frr, h = hter(scores, ds.labels, threshold)
    return DomainRecord(ds.domain_name, far, frr, h, len(ds), threshold)


def cross_domain_eval(net: SDDGNet, test_domains: Sequence[LabeledDataset], threshold: float = 0.5,
                      sanity_domains: Sequence[LabeledDataset] = ()) -> EvalReport:
    """One record per unseen domain (ordered by name) and their unweighted mean HTER.

    ``sanity_domains`` (e.g. held-out source data) are reported separately and
    excluded from the average.
    """
    if not test_domains:
        raise ValueError("no test domains given")
    records = [evaluate_domain(net, ds, threshold) for ds in sorted(test_domains, key=lambda d: d.domain_name)]
    sanity = [evaluate_domain(net, ds, threshold) for ds in sanity_domains]
    return EvalReport(records, float(np.mean([r.hter for r in records])), sanity)


def dump_dynamic_weights(net: SDDGNet, datasets: Union[LabeledDataset, Sequence[LabeledDataset]],
                         out_path: Union[str, Path]) -> int:
    """Write (domain, label, w_1..w_K) rows, one per sample; returns the row count."""
    if net.dynamic is None:
        raise ValueError("model has no dynamic block to dump")
    if isinstance(datasets, LabeledDataset):
        datasets = [datasets]
    count = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "label"] + [f"w_{i + 1}" for i in range(net.k)])
        for ds in datasets:
            _, weights = predict(net, ds)
            for lab, row in zip(ds.labels, weights):
                writer.writerow([ds.domain_name, int(lab)] + [f"{v:.8f}" for v in row])
            count += len(weights)
    return count


def class_weight_separation(weights: np.ndarray, labels: np.ndarray) -> float:
    """L2 distance between the class-conditional mean weight vectors."""
    labels = np.asarray(labels)
    return float(np.linalg.norm(weights[labels == 0].mean(0) - weights[labels == 1].mean(0)))
