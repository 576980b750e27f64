"""Hand-built five-query retrieval fixture shared by the metric tests."""

from actprompt.data import AnnotationRecord
from actprompt.metrics import GroundingPrediction
from actprompt.pretext import MomentSpan

# qid: (duration, ground-truth windows, ranked (start, end, confidence) predictions)
FIVE_QUERIES = {
    "q1": (60.0, [(0, 10)], [(0, 10, 0.9), (20, 30, 0.5)]),
    "q2": (60.0, [(10, 20), (40, 50)], [(12, 20, 0.8), (30, 35, 0.7), (40, 50, 0.6)]),
    "q3": (30.0, [(5, 15)], [(10, 20, 0.9), (5, 15, 0.4)]),
    "q4": (30.0, [(0, 4)], [(0, 8, 0.6), (20, 24, 0.5)]),
    "q5": (40.0, [(20, 30), (0, 2)], [(22, 30, 0.7), (21, 29, 0.65), (0, 2, 0.3)]),
}


def five_query_fixture():
    gts, preds = [], []
    for qid, (duration, windows, ranked) in FIVE_QUERIES.items():
        gts.append(AnnotationRecord(qid, f"v_{qid}", duration, "someone moves",
                                    [MomentSpan(a, b) for a, b in windows]))
        preds.append(GroundingPrediction(qid, [(MomentSpan(a, b), c) for a, b, c in ranked]))
    return preds, gts
