"""Error rate, macro accuracy, duration buckets, confusions and the segment-length sweep."""
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from titanet_lid.audio import FeatureConfig, log_mel, segment_sweep
from titanet_lid.errors import DegenerateInputError, LabelError
from titanet_lid.model import batch_features
from titanet_lid.nn.functional import log_softmax_array
from titanet_lid.nn.tensor import no_grad

# Lower bucket is half-open; everything from 5 s upward lands in the second one.
BUCKETS = (("0...5s", 0.0, 5.0), ("5...20s", 5.0, math.inf))


def bucket_of(duration):
    for name, lo, hi in BUCKETS:
        if lo <= duration < hi:
            return name
    raise ValueError(f"negative duration {duration}")


@dataclass
class EvalReport:
    num_samples: int
    error_rate: float
    macro_accuracy: float
    bucket_errors: dict = field(default_factory=dict)
    confusions: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["confusions"] = [list(c) for c in self.confusions]
        return d

    def to_text(self):
        """Stable JSON document (fixed field order, sorted class keys)."""
        d = self.to_dict()
        d["per_class"] = {k: d["per_class"][k] for k in sorted(d["per_class"])}
        return json.dumps(d, indent=2)

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        d["confusions"] = [tuple(c) for c in d["confusions"]]
        return cls(**d)

    def summary(self):
        lines = [
            f"samples          {self.num_samples}",
            f"error rate (avg) {100 * self.error_rate:.2f}%  (pooled over all samples)",
            f"macro accuracy   {100 * self.macro_accuracy:.2f}%",
        ]
        for name, b in self.bucket_errors.items():
            rate = "n/a" if b["error_rate"] is None else f"{100 * b['error_rate']:.2f}%"
            lines.append(f"bucket {name:<9} n={b['n']:<6d} error {rate}")
        return "\n".join(lines)


def build_report(true_labels, pred_labels, durations):
    """Assemble an :class:`EvalReport` from parallel sequences of labels and durations."""
    if not len(true_labels) == len(pred_labels) == len(durations):
        raise ValueError("true_labels, pred_labels and durations differ in length")
    n = len(true_labels)
    per_class = {}
    buckets = {name: [0, 0] for name, _, _ in BUCKETS}
    pairs = Counter()
    errors = 0
    for t, p, d in zip(true_labels, pred_labels, durations):
        stats = per_class.setdefault(t, {"n": 0, "correct": 0})
        stats["n"] += 1
        b = buckets[bucket_of(d)]
        b[0] += 1
        if t == p:
            stats["correct"] += 1
        else:
            errors += 1
            b[1] += 1
            pairs[(t, p)] += 1
    # Exact rational mean, rounded once, so the value does not depend on class order.
    macro = float(sum(Fraction(s["correct"], s["n"]) for s in per_class.values()) / len(per_class)) \
        if per_class else math.nan
    bucket_errors = {name: {"n": b[0], "error_rate": (b[1] / b[0]) if b[0] else None}
                     for name, b in buckets.items()}
    confusions = sorted(((t, p, c) for (t, p), c in pairs.items()), key=lambda r: (-r[2], r[0], r[1]))
    return EvalReport(n, errors / n if n else math.nan, macro, bucket_errors, confusions, per_class)


def top_confusions(report, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(report.confusions[:k])


def posteriors(model, features, batch_size=16):
    """Softmax posteriors ``[N, K]`` for a list of feature matrices, eval mode.

    Items are grouped by length to limit padding; results are returned in input order.
    """
    mats = [getattr(f, "mels", f) for f in features]
    out = np.empty((len(mats), model.config.num_classes))
    order = sorted(range(len(mats)), key=lambda i: mats[i].shape[1])
    with no_grad():
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x, mask = batch_features([mats[i] for i in idx])
            logits = model.forward(x, mask, mode="eval").data
            out[idx] = np.exp(log_softmax_array(logits))
    return out


def predict_utterance(model, audio, labels, feature_cfg=FeatureConfig()):
    """Classify the whole utterance in one pass; returns ``(label, posteriors)``."""
    feats = log_mel(audio, feature_cfg)
    post = posteriors(model, [feats])[0]
    return labels[int(np.argmax(post))], post


def _check_labels(dataset_labels, labels):
    unknown = sorted(set(dataset_labels) - set(labels))
    if unknown:
        raise LabelError(f"labels not known to the model: {unknown}")


def evaluate_features(model, features, true_labels, durations, labels, batch_size=16):
    _check_labels(true_labels, labels)
    if not features:
        raise DegenerateInputError("nothing to evaluate")
    post = posteriors(model, features, batch_size)
    preds = [labels[i] for i in np.argmax(post, axis=1)]
    return build_report(list(true_labels), preds, list(durations))


def evaluate(model, dataset, labels, feature_cfg=FeatureConfig(), batch_size=16):
    """Full-utterance evaluation of every entry in ``dataset``."""
    _check_labels([e.label for e in dataset], labels)
    feats, truth, durs = [], [], []
    for e in dataset:
        audio = e.load()
        feats.append(log_mel(audio, feature_cfg))
        truth.append(e.label)
        durs.append(audio.duration)
    return evaluate_features(model, feats, truth, durs, labels, batch_size)


def length_sweep(model, dataset, labels, lengths=(1, 2, 3, 4, 6, 8), stride=2.0,
                 feature_cfg=FeatureConfig(), batch_size=16):
    """Error rate per window length; each window from the stride-``stride`` split is classified alone.

    Lengths with no windows are left out of the result rather than reported as zero.
    """
    _check_labels([e.label for e in dataset], labels)
    windows = {L: ([], []) for L in lengths}
    for e in dataset:
        audio = e.load()
        for L, segs in segment_sweep(audio, lengths, stride).items():
            for seg in segs:
                windows[L][0].append(log_mel(seg, feature_cfg))
                windows[L][1].append(e.label)
    out = {}
    for L in lengths:
        feats, truth = windows[L]
        if not feats:
            continue
        post = posteriors(model, feats, batch_size)
        preds = [labels[i] for i in np.argmax(post, axis=1)]
        errors = sum(p != t for p, t in zip(preds, truth))
        out[L] = {"n": len(feats), "error_rate": errors / len(feats)}
    return out


def sweep_csv(sweep):
    rows = ["length_s,windows,error_rate"]
    rows += [f"{L:g},{r['n']},{r['error_rate']:.6f}" for L, r in sweep.items()]
    return "\n".join(rows) + "\n"
