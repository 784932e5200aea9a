"""Panoptic quality (PQ / SQ / RQ) over per-pixel (class, instance) maps.

A segment is one (class id, instance id) pair with instance id >= 1;
instance id 0 marks void pixels. Prediction and ground-truth segments of the
same class match when their IoU is strictly greater than 0.5, which makes
the matching unique without any assignment step. Void pixels are excluded
from both the intersection and the union when computing IoU.

Per class:  SQ = iou_sum / tp          (0 when tp = 0)
            RQ = tp / (tp + fp/2 + fn/2)
            PQ = SQ * RQ
Aggregates are unweighted means over classes present in either map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

# Instance ids are composed with class ids into single keys for vectorized
# intersection counting; keep ids below this bound.
_MAX_INSTANCE = 1 << 20


@dataclass(frozen=True)
class PanopticMap:
    class_ids: np.ndarray
    instance_ids: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.class_ids, dtype=np.int64)
        inst = np.asarray(self.instance_ids, dtype=np.int64)
        if cls.ndim != 2 or cls.shape != inst.shape:
            raise DimensionError(
                f"class plane {cls.shape} and instance plane {inst.shape} must be "
                "equal 2-D canvases"
            )
        if cls.min(initial=0) < 0 or inst.min(initial=0) < 0:
            raise ConfigError("ids must be non-negative")
        if inst.max(initial=0) >= _MAX_INSTANCE:
            raise ConfigError(f"instance ids must be < {_MAX_INSTANCE}")
        object.__setattr__(self, "class_ids", cls)
        object.__setattr__(self, "instance_ids", inst)

    @property
    def height(self) -> int:
        return int(self.class_ids.shape[0])

    @property
    def width(self) -> int:
        return int(self.class_ids.shape[1])

    def segment_keys(self) -> np.ndarray:
        """Combined (class, instance) key per pixel; 0 where void."""
        valid = self.instance_ids > 0
        return np.where(valid, self.class_ids * _MAX_INSTANCE + self.instance_ids, 0)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean pixel sets on one canvas."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"canvas mismatch {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise UsageError("IoU of two empty segments is undefined")
    return int(np.logical_and(a, b).sum()) / union


@dataclass(frozen=True)
class SegmentMatch:
    pred: tuple[int, int]  # (class id, instance id)
    gt: tuple[int, int]
    iou: float


@dataclass(frozen=True)
class MatchResult:
    matches: tuple[SegmentMatch, ...]
    unmatched_pred: tuple[tuple[int, int], ...]
    unmatched_gt: tuple[tuple[int, int], ...]


def _decode(key: int) -> tuple[int, int]:
    return int(key) // _MAX_INSTANCE, int(key) % _MAX_INSTANCE


def match_segments(pred: PanopticMap, gt: PanopticMap) -> MatchResult:
    """Match same-class segment pairs with IoU strictly above 0.5.

    The strict threshold guarantees at most one partner per segment, so
    matching is a filter, not an assignment problem.
    """
    if pred.class_ids.shape != gt.class_ids.shape:
        raise DimensionError(
            f"canvas mismatch {pred.class_ids.shape} vs {gt.class_ids.shape}"
        )
    pk = pred.segment_keys()
    gk = gt.segment_keys()
    # A void pixel belongs to no segment of its map, so it can only enter a
    # union through the other map's side; intersections need both non-void.
    valid = (pk > 0) & (gk > 0)

    pred_segments = {int(k) for k in np.unique(pk) if k > 0}
    gt_segments = {int(k) for k in np.unique(gk) if k > 0}

    pred_areas = dict(zip(*(arr.tolist() for arr in np.unique(pk[pk > 0], return_counts=True))))
    gt_areas = dict(zip(*(arr.tolist() for arr in np.unique(gk[gk > 0], return_counts=True))))

    pairs, pair_counts = np.unique(
        np.stack([pk[valid], gk[valid]], axis=1), axis=0, return_counts=True
    )

    matches = []
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (p_key, g_key), inter in zip(pairs.tolist(), pair_counts.tolist()):
        if p_key // _MAX_INSTANCE != g_key // _MAX_INSTANCE:
            continue  # different classes never match
        union = pred_areas.get(p_key, 0) + gt_areas.get(g_key, 0) - inter
        if union <= 0:
            continue
        if inter / union > 0.5:
            assert p_key not in matched_pred and g_key not in matched_gt
            matched_pred.add(p_key)
            matched_gt.add(g_key)
            matches.append(SegmentMatch(_decode(p_key), _decode(g_key), inter / union))

    matches.sort(key=lambda m: (m.pred, m.gt))
    return MatchResult(
        matches=tuple(matches),
        unmatched_pred=tuple(sorted(_decode(k) for k in pred_segments - matched_pred)),
        unmatched_gt=tuple(sorted(_decode(k) for k in gt_segments - matched_gt)),
    )


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq


@dataclass(frozen=True)
class Aggregate:
    pq: float
    sq: float
    rq: float
    n: int


@dataclass
class PqStats:
    per_class: dict[int, ClassStats] = field(default_factory=dict)

    def add(self, other: "PqStats") -> "PqStats":
        """Merge per-image stats by summing counts; aggregates recompute lazily."""
        for cls, st in other.per_class.items():
            mine = self.per_class.setdefault(cls, ClassStats())
            mine.tp += st.tp
            mine.fp += st.fp
            mine.fn += st.fn
            mine.iou_sum += st.iou_sum
        return self

    def aggregate(self, classes: set[int] | None = None) -> Aggregate:
        chosen = [
            st
            for cls, st in sorted(self.per_class.items())
            if classes is None or cls in classes
        ]
        if not chosen:
            return Aggregate(0.0, 0.0, 0.0, 0)
        n = len(chosen)
        return Aggregate(
            pq=sum(s.pq for s in chosen) / n,
            sq=sum(s.sq for s in chosen) / n,
            rq=sum(s.rq for s in chosen) / n,
            n=n,
        )

    def to_json_dict(self, thing_classes: set[int], stuff_classes: set[int]) -> dict:
        def agg(a: Aggregate) -> dict:
            return {"pq": a.pq, "sq": a.sq, "rq": a.rq, "n": a.n}

        return {
            "per_class": {
                str(cls): {
                    "tp": st.tp,
                    "fp": st.fp,
                    "fn": st.fn,
                    "iou_sum": st.iou_sum,
                    "pq": st.pq,
                    "sq": st.sq,
                    "rq": st.rq,
                }
                for cls, st in sorted(self.per_class.items())
            },
            "all": agg(self.aggregate()),
            "things": agg(self.aggregate(thing_classes)),
            "stuff": agg(self.aggregate(stuff_classes)),
        }


def pq_stats(
    pred: PanopticMap,
    gt: PanopticMap,
    thing_classes: set[int] = frozenset(),
    stuff_classes: set[int] = frozenset(),
) -> PqStats:
    if set(thing_classes) & set(stuff_classes):
        raise ConfigError(
            f"thing/stuff class sets overlap: {sorted(set(thing_classes) & set(stuff_classes))}"
        )
    result = match_segments(pred, gt)
    stats = PqStats()
    for m in result.matches:
        st = stats.per_class.setdefault(m.pred[0], ClassStats())
        st.tp += 1
        st.iou_sum += m.iou
    for cls, _ in result.unmatched_pred:
        stats.per_class.setdefault(cls, ClassStats()).fp += 1
    for cls, _ in result.unmatched_gt:
        stats.per_class.setdefault(cls, ClassStats()).fn += 1
    return stats
