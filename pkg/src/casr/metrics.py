"""Word error rate via Levenshtein alignment, plus emission-latency stats.

Latency has two parts: per-token delay percentiles over correctly aligned
tokens (emit frame mapped back to the input timebase, minus the true end
frame), and an endpoint proxy, the delay until the hypothesis stops
changing. The proxy stands in for endpointer latency and is labeled as
such in reports.
"""

import logging
import math
from dataclasses import dataclass, field

from casr.decoder import decode_dual
from casr.frontend import load_record_features, read_manifest

log = logging.getLogger(__name__)


@dataclass
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    wer: float = field(init=False)
    alignment: list = field(default_factory=list)

    def __post_init__(self):
        for v in (self.substitutions, self.insertions, self.deletions,
                  self.ref_len):
            if v < 0:
                raise ValueError("counts must be non-negative")
        if self.substitutions + self.deletions > self.ref_len:
            raise ValueError("S + D cannot exceed the reference length")
        self.wer = ((self.substitutions + self.insertions + self.deletions)
                    / max(1, self.ref_len))

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions


@dataclass
class LatencyStats:
    delays_ms: list
    p50_ms: float          # None when no correct tokens exist
    p90_ms: float
    ep_proxy_ms: float     # hypothesis stabilization delay, None if empty
    empty: bool


def nearest_rank(values, q):
    """Nearest-rank percentile: sorted value at index ceil(q*n), 1-based."""
    if not values:
        raise ValueError("percentile of an empty list")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    ordered = sorted(values)
    return ordered[math.ceil(q * len(ordered)) - 1]


def edit_distance_align(ref, hyp):
    """Unit-cost Levenshtein with a deterministic backtrace.

    The alignment is a list of (op, ref_index, hyp_index) with op in
    match|sub|del|ins; unused indices are None. Ties during backtrace
    prefer the diagonal move, then deletion, then insertion, so equal-cost
    substitutions win over insert+delete pairs.
    """
    ref = list(ref)
    hyp = list(hyp)
    n_r, n_h = len(ref), len(hyp)
    dist = [[0] * (n_h + 1) for _ in range(n_r + 1)]
    for i in range(1, n_r + 1):
        dist[i][0] = i
    for j in range(1, n_h + 1):
        dist[0][j] = j
    for i in range(1, n_r + 1):
        for j in range(1, n_h + 1):
            same = 0 if ref[i - 1] == hyp[j - 1] else 1
            dist[i][j] = min(dist[i - 1][j - 1] + same,
                             dist[i - 1][j] + 1,
                             dist[i][j - 1] + 1)
    ops = []
    i, j = n_r, n_h
    while i > 0 or j > 0:
        same = (i > 0 and j > 0 and ref[i - 1] == hyp[j - 1])
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (not same):
            ops.append(("match" if same else "sub", i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    subs = sum(1 for op, _, _ in ops if op == "sub")
    dels = sum(1 for op, _, _ in ops if op == "del")
    ins = sum(1 for op, _, _ in ops if op == "ins")
    return WerBreakdown(subs, ins, dels, n_r, alignment=ops)


def encoder_frame_to_input(t, total_reduction):
    """Last input frame an encoder frame can depend on."""
    return t * total_reduction + total_reduction - 1


def emission_latency(result, truth_end_frames, alignment, frame_period_ms,
                     total_reduction=1):
    """Per-token delays for correctly aligned tokens, in milliseconds.

    `truth_end_frames` are input-timebase end frames per reference token;
    emit frames are mapped through the stacking/reduction factor before
    differencing. The endpoint proxy is the delay from the last true end
    frame to the input frame at which the hypothesis stopped changing
    (the final emission under greedy decoding).
    """
    delays = []
    for op, ri, hi in alignment:
        if op != "match":
            continue
        emitted = encoder_frame_to_input(result.emit_frames[hi],
                                         total_reduction)
        delays.append((emitted - truth_end_frames[ri]) * frame_period_ms)
    last_speech = truth_end_frames[-1] if len(truth_end_frames) else 0
    if result.emit_frames:
        stabilized = encoder_frame_to_input(result.emit_frames[-1],
                                            total_reduction)
        ep_proxy = (stabilized - last_speech) * frame_period_ms
    else:
        ep_proxy = None
    if not delays:
        return LatencyStats([], None, None, ep_proxy, True)
    return LatencyStats(delays, nearest_rank(delays, 0.5),
                        nearest_rank(delays, 0.9), ep_proxy, False)


@dataclass
class CorpusReport:
    wer: WerBreakdown
    latency: LatencyStats
    mode: str
    beam: int
    utterances: int
    skipped: int


def corpus_eval(manifest_path, model, mode, beam=0, max_skip_fraction=0.1):
    """Pooled WER and latency over a manifest: total errors over total
    reference tokens, delays pooled across every correct token."""
    records = read_manifest(manifest_path)
    if not records:
        raise ValueError("manifest %s holds no records" % (manifest_path,))
    subs = ins = dels = ref_len = 0
    delays = []
    ep_values = []
    skipped = 0
    reduction = model.config.total_reduction
    for rec in records:
        try:
            feats = load_record_features(manifest_path, rec)
            result = decode_dual(feats, model, mode, beam=beam)
        except (OSError, ValueError) as exc:
            log.warning("skipping record %s: %s", rec.id, exc)
            skipped += 1
            continue
        bd = edit_distance_align(rec.tokens, result.tokens)
        subs += bd.substitutions
        ins += bd.insertions
        dels += bd.deletions
        ref_len += bd.ref_len
        lat = emission_latency(result, rec.end_frames, bd.alignment,
                               feats.frame_period_ms, reduction)
        delays.extend(lat.delays_ms)
        if lat.ep_proxy_ms is not None:
            ep_values.append(lat.ep_proxy_ms)
    if skipped > max_skip_fraction * len(records):
        raise RuntimeError("%d of %d records unreadable" % (skipped,
                                                            len(records)))
    pooled = WerBreakdown(subs, ins, dels, ref_len)
    if delays:
        lat = LatencyStats(delays, nearest_rank(delays, 0.5),
                           nearest_rank(delays, 0.9),
                           nearest_rank(ep_values, 0.5) if ep_values
                           else None, False)
    else:
        lat = LatencyStats([], None, None,
                           nearest_rank(ep_values, 0.5) if ep_values
                           else None, True)
    return CorpusReport(pooled, lat, mode, beam,
                        len(records) - skipped, skipped)


def report_dict(report):
    """Evaluation report as a plain JSON-ready dict."""
    return {
        "wer": report.wer.wer,
        "substitutions": report.wer.substitutions,
        "insertions": report.wer.insertions,
        "deletions": report.wer.deletions,
        "ref_len": report.wer.ref_len,
        "latency": {
            "p50_ms": report.latency.p50_ms,
            "p90_ms": report.latency.p90_ms,
            "ep_proxy_ms": report.latency.ep_proxy_ms,
        },
        "mode": report.mode,
        "beam": report.beam,
        "utterances": report.utterances,
        "skipped": report.skipped,
    }
