"""Tracking metrics: CLEAR-MOT (MOTA, FP, FN, IDSW, Frag, MT, ML), IDF1 and
HOTA, with per-sequence and pooled (COMBINED) reporting.

All counts are exact integers; ratios are computed in double precision at the
end so pooled results are exactly reproducible from summed counts.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import AnnotatedSequence, iou
from .assoc import hungarian

HOTA_ALPHAS = tuple(round(0.05 * k, 2) for k in range(1, 20))
MT_THRESHOLD = 0.8
ML_THRESHOLD = 0.2
_EPS = 1e-9


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ClearReport:
    mota: float
    fp: int
    fn: int
    idsw: int
    frag: int
    mt: int
    ml: int
    fp_per_frame: float
    gt_detections: int
    gt_tracks: int = 0
    frame_count: int = 0


@dataclass(frozen=True)
class IDReport:
    idf1: float
    idtp: int
    idfp: int
    idfn: int


@dataclass(frozen=True)
class AlphaCounts:
    alpha: float
    tp: int
    fn: int
    fp: int
    ass_sum: float   # sum over TPs of TPA/(TPA+FNA+FPA)

    @property
    def deta(self) -> float:
        denom = self.tp + self.fn + self.fp
        return self.tp / denom if denom > 0 else 1.0

    @property
    def assa(self) -> float:
        if self.tp == 0:
            return 1.0 if self.fn + self.fp == 0 else 0.0
        return self.ass_sum / self.tp

    @property
    def hota(self) -> float:
        return math.sqrt(self.deta * self.assa)


@dataclass(frozen=True)
class HotaReport:
    hota: float
    deta: float
    assa: float
    per_alpha: tuple   # of AlphaCounts


@dataclass(frozen=True)
class MetricsReport:
    per_sequence: dict   # name -> (ClearReport, IDReport, HotaReport)
    combined: tuple


def _frame_data(seq: AnnotatedSequence):
    """Per-frame (ids, boxes) lists for frames 1..frame_count."""
    out = []
    for frame in range(1, seq.frame_count + 1):
        pairs = seq.boxes_at(frame)
        out.append(([tid for tid, _ in pairs], [box for _, box in pairs]))
    return out


def _check_compatible(gt: AnnotatedSequence, pred: AnnotatedSequence):
    if gt.frame_count != pred.frame_count:
        raise InputError(
            f"frame_count mismatch: gt={gt.frame_count}, pred={pred.frame_count}"
        )


def clear_mot(gt: AnnotatedSequence, pred: AnnotatedSequence,
              iou_threshold: float = 0.5) -> ClearReport:
    """CLEAR-MOT protocol with carry-over matching.

    Each frame first keeps the previous frame's correspondences that are
    still above the IoU threshold, then matches the remainder by Hungarian
    on 1 - IoU.
    """
    _check_compatible(gt, pred)
    gt_frames = _frame_data(gt)
    pred_frames = _frame_data(pred)

    fp = fn = idsw = 0
    prev_corr: dict = {}       # gt id -> pred id from previous frame's matching
    last_match: dict = {}      # gt id -> most recent matched pred id (any gap)
    matched_frames: dict = {tid: 0 for tid in (t.id for t in gt.tracks)}
    was_matched_prev: dict = {}
    had_gap: dict = {}
    frag = 0

    for (gt_ids, gt_boxes), (pr_ids, pr_boxes) in zip(gt_frames, pred_frames):
        pr_index = {pid: k for k, pid in enumerate(pr_ids)}
        corr: dict = {}

        # carry over surviving correspondences
        for gi, gid in enumerate(gt_ids):
            pid = prev_corr.get(gid)
            if pid is not None and pid in pr_index and pid not in corr.values():
                if iou(gt_boxes[gi], pr_boxes[pr_index[pid]]) >= iou_threshold:
                    corr[gid] = pid

        free_g = [i for i, gid in enumerate(gt_ids) if gid not in corr]
        taken = set(corr.values())
        free_p = [k for k, pid in enumerate(pr_ids) if pid not in taken]
        if free_g and free_p:
            cost = np.full((len(free_g), len(free_p)), np.inf)
            for a, gi in enumerate(free_g):
                for b, pk in enumerate(free_p):
                    overlap = iou(gt_boxes[gi], pr_boxes[pk])
                    if overlap >= iou_threshold:
                        cost[a, b] = 1.0 - overlap
            for a, b in hungarian(cost).pairs:
                corr[gt_ids[free_g[a]]] = pr_ids[free_p[b]]

        fn += len(gt_ids) - len(corr)
        fp += len(pr_ids) - len(corr)

        for gid in gt_ids:
            if gid in corr:
                pid = corr[gid]
                if gid in last_match and last_match[gid] != pid:
                    idsw += 1
                last_match[gid] = pid
                matched_frames[gid] += 1
                if had_gap.get(gid):
                    frag += 1
                    had_gap[gid] = False
                was_matched_prev[gid] = True
            else:
                if was_matched_prev.get(gid):
                    had_gap[gid] = True
                was_matched_prev[gid] = False

        prev_corr = corr

    gt_det = sum(len(t) for t in gt.tracks)
    mt = ml = 0
    for t in gt.tracks:
        ratio = matched_frames[t.id] / len(t)
        if ratio >= MT_THRESHOLD:
            mt += 1
        elif ratio <= ML_THRESHOLD:
            ml += 1

    if gt_det > 0:
        mota = 1.0 - (fp + fn + idsw) / gt_det
    else:
        mota = 1.0 if fp + idsw == 0 else 0.0
    return ClearReport(
        mota=mota, fp=fp, fn=fn, idsw=idsw, frag=frag, mt=mt, ml=ml,
        fp_per_frame=fp / gt.frame_count, gt_detections=gt_det,
        gt_tracks=len(gt.tracks), frame_count=gt.frame_count,
    )


def idf1(gt: AnnotatedSequence, pred: AnnotatedSequence,
         iou_threshold: float = 0.5) -> IDReport:
    """IDF1 via a single global bipartite matching maximizing IDTP."""
    _check_compatible(gt, pred)
    gt_ids = [t.id for t in gt.tracks]
    pr_ids = [t.id for t in pred.tracks]
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    gi = {tid: i for i, tid in enumerate(gt_ids)}
    pi = {tid: j for j, tid in enumerate(pr_ids)}
    for (g_list, g_boxes), (p_list, p_boxes) in zip(_frame_data(gt), _frame_data(pred)):
        for a, gid in enumerate(g_list):
            for b, pid in enumerate(p_list):
                if iou(g_boxes[a], p_boxes[b]) >= iou_threshold:
                    overlap[gi[gid], pi[pid]] += 1

    idtp = 0
    if overlap.size:
        assn = hungarian(-overlap)
        idtp = int(sum(overlap[r, c] for r, c in assn.pairs))
    total_gt = sum(len(t) for t in gt.tracks)
    total_pr = sum(len(t) for t in pred.tracks)
    idfn = total_gt - idtp
    idfp = total_pr - idtp
    denom = 2 * idtp + idfp + idfn
    return IDReport(
        idf1=(2 * idtp / denom) if denom > 0 else 0.0,
        idtp=idtp, idfp=idfp, idfn=idfn,
    )


def _hota_alpha(gt_frames, pred_frames, gt_count, pr_count, alpha) -> AlphaCounts:
    """One α slice of HOTA: two-pass matching per the HOTA protocol."""
    # pass 1: potential match counts per id pair
    potential: dict = {}
    sims = []
    for (g_list, g_boxes), (p_list, p_boxes) in zip(gt_frames, pred_frames):
        sim = np.zeros((len(g_list), len(p_list)))
        for a in range(len(g_list)):
            for b in range(len(p_list)):
                sim[a, b] = iou(g_boxes[a], p_boxes[b])
        sims.append(sim)
        for a, gid in enumerate(g_list):
            for b, pid in enumerate(p_list):
                if sim[a, b] >= alpha - _EPS:
                    potential[(gid, pid)] = potential.get((gid, pid), 0) + 1

    align = {
        pair: cnt / (gt_count[pair[0]] + pr_count[pair[1]] - cnt)
        for pair, cnt in potential.items()
    }

    # pass 2: per-frame matching maximizing alignment (IoU as tiebreak)
    tp = fn = fp = 0
    match_count: dict = {}
    frame_matches = []
    for sim, (g_list, _), (p_list, _) in zip(sims, gt_frames, pred_frames):
        matches = []
        if g_list and p_list:
            score = np.full(sim.shape, np.inf)
            for a, gid in enumerate(g_list):
                for b, pid in enumerate(p_list):
                    if sim[a, b] >= alpha - _EPS:
                        score[a, b] = -(align[(gid, pid)] + sim[a, b] / 1000.0)
            for a, b in hungarian(score).pairs:
                matches.append((g_list[a], p_list[b]))
        frame_matches.append(matches)
        tp += len(matches)
        fn += len(g_list) - len(matches)
        fp += len(p_list) - len(matches)
        for pair in matches:
            match_count[pair] = match_count.get(pair, 0) + 1

    ass_sum = 0.0
    for matches in frame_matches:
        for gid, pid in matches:
            tpa = match_count[(gid, pid)]
            fna = gt_count[gid] - tpa
            fpa = pr_count[pid] - tpa
            ass_sum += tpa / (tpa + fna + fpa)
    return AlphaCounts(alpha=alpha, tp=tp, fn=fn, fp=fp, ass_sum=ass_sum)


def _hota_from_alpha_counts(per_alpha) -> HotaReport:
    return HotaReport(
        hota=sum(a.hota for a in per_alpha) / len(per_alpha),
        deta=sum(a.deta for a in per_alpha) / len(per_alpha),
        assa=sum(a.assa for a in per_alpha) / len(per_alpha),
        per_alpha=tuple(per_alpha),
    )


def hota(gt: AnnotatedSequence, pred: AnnotatedSequence) -> HotaReport:
    """HOTA over the 19-value α grid 0.05..0.95."""
    _check_compatible(gt, pred)
    gt_frames = _frame_data(gt)
    pred_frames = _frame_data(pred)
    gt_count = {t.id: len(t) for t in gt.tracks}
    pr_count = {t.id: len(t) for t in pred.tracks}
    per_alpha = [
        _hota_alpha(gt_frames, pred_frames, gt_count, pr_count, alpha)
        for alpha in HOTA_ALPHAS
    ]
    return _hota_from_alpha_counts(per_alpha)


def evaluate_sequence(gt: AnnotatedSequence, pred: AnnotatedSequence,
                      iou_threshold: float = 0.5):
    return (clear_mot(gt, pred, iou_threshold), idf1(gt, pred, iou_threshold),
            hota(gt, pred))


def pool_combined(reports: dict) -> MetricsReport:
    """Pool per-sequence reports into a COMBINED row from summed counts."""
    if not reports:
        raise InputError("cannot pool an empty report map")
    clears = [triple[0] for triple in reports.values()]
    ids = [triple[1] for triple in reports.values()]
    hotas = [triple[2] for triple in reports.values()]

    fp = sum(c.fp for c in clears)
    fn = sum(c.fn for c in clears)
    idsw = sum(c.idsw for c in clears)
    gt_det = sum(c.gt_detections for c in clears)
    frames = sum(c.frame_count for c in clears)
    combined_clear = ClearReport(
        mota=1.0 - (fp + fn + idsw) / gt_det if gt_det > 0 else 1.0,
        fp=fp, fn=fn, idsw=idsw,
        frag=sum(c.frag for c in clears),
        mt=sum(c.mt for c in clears), ml=sum(c.ml for c in clears),
        fp_per_frame=fp / frames if frames else 0.0,
        gt_detections=gt_det,
        gt_tracks=sum(c.gt_tracks for c in clears),
        frame_count=frames,
    )
    idtp = sum(r.idtp for r in ids)
    idfp = sum(r.idfp for r in ids)
    idfn = sum(r.idfn for r in ids)
    denom = 2 * idtp + idfp + idfn
    combined_id = IDReport(
        idf1=(2 * idtp / denom) if denom > 0 else 0.0,
        idtp=idtp, idfp=idfp, idfn=idfn,
    )
    per_alpha = []
    for k, alpha in enumerate(HOTA_ALPHAS):
        per_alpha.append(AlphaCounts(
            alpha=alpha,
            tp=sum(h.per_alpha[k].tp for h in hotas),
            fn=sum(h.per_alpha[k].fn for h in hotas),
            fp=sum(h.per_alpha[k].fp for h in hotas),
            ass_sum=sum(h.per_alpha[k].ass_sum for h in hotas),
        ))
    return MetricsReport(
        per_sequence=dict(reports),
        combined=(combined_clear, combined_id, _hota_from_alpha_counts(per_alpha)),
    )


CSV_HEADER = "Sequence,MOTA,IDF1,HOTA,MT,ML,Frag,FP(/frame),ID Sw."


def _csv_row(name, clear: ClearReport, idr: IDReport, hot: HotaReport) -> str:
    return (f"{name},{clear.mota:.6g},{idr.idf1:.6g},{hot.hota:.6g},"
            f"{clear.mt},{clear.ml},{clear.frag},{clear.fp_per_frame:.6g},{clear.idsw}")


def report_to_csv(report: MetricsReport) -> str:
    lines = [CSV_HEADER]
    for name in sorted(report.per_sequence):
        lines.append(_csv_row(name, *report.per_sequence[name]))
    lines.append(_csv_row("COMBINED", *report.combined))
    return "".join(line + "\n" for line in lines)


def _triple_to_dict(clear: ClearReport, idr: IDReport, hot: HotaReport) -> dict:
    return {
        "clear": {
            "mota": clear.mota, "fp": clear.fp, "fn": clear.fn,
            "idsw": clear.idsw, "frag": clear.frag, "mt": clear.mt,
            "ml": clear.ml, "fp_per_frame": clear.fp_per_frame,
            "gt_detections": clear.gt_detections,
        },
        "id": {"idf1": idr.idf1, "idtp": idr.idtp, "idfp": idr.idfp, "idfn": idr.idfn},
        "hota": {
            "hota": hot.hota, "deta": hot.deta, "assa": hot.assa,
            "per_alpha": [(a.alpha, a.hota) for a in hot.per_alpha],
        },
    }


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "per_sequence": {
            name: _triple_to_dict(*triple)
            for name, triple in sorted(report.per_sequence.items())
        },
        "combined": _triple_to_dict(*report.combined),
    }
    return json.dumps(doc, indent=2)
