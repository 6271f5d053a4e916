"""Hand-enumerated incremental logs with their expected metric values.

Every expected value below was worked out by hand from the definitions in
``inclt.metrics`` (edit taxonomy, CT normalisation, delayed views); the
working is noted next to each fixture.  Values are exact fractions.
"""

from __future__ import annotations

import random
from fractions import Fraction as F

from inclt.incremental import IncrementalLog

# (name, log, EO, CT, RC, EO_d1, EO_d2, RC_d1, RC_d2)
FIXTURES = [
    # t1 [A]  t2 [B,C]  t3 [B,C,D]
    # edits: 3 adds + A->B = 4, EO 1/4.  CT: pos0 (2-1)/(3-1), pos1 0, pos2 0 -> 1/6.
    # RC: [A] wrong -> 2/3.  Delayed views only ever show [B..] prefixes.
    ("tag-d0-substitution",
     IncrementalLog("tagging", 3, [["A"], ["B", "C"], ["B", "C", "D"]], 0),
     F(1, 4), F(1, 6), F(2, 3), F(0), F(0), F(1), F(1)),
    # classification a, b, b: 1 add + 1 change; CT (2-1)/(3-1); RC 2/3.
    # d1 view: None, b, b, b.  d2 view: None, None, b, b, b.
    ("cls-d0-one-change",
     IncrementalLog("classification", 3, ["a", "b", "b"], 0),
     F(1, 2), F(1, 2), F(2, 3), F(0), F(0), F(1), F(1)),
    # delay 1: t1 []  t2 [A]  t3 [A,B]  t4 [A,C,D]
    # edits: 3 adds + B->C, EO 1/4.  CT: pos0 0, pos1 (4-3)/(4-3) = 1, pos2 0 -> 1/3.
    # RC: [A] ok, [A,B] wrong, final ok -> 2/3.
    # d1 view: [], [], [A], [A,C], [A,C,D] -> all prefixes.
    ("tag-d1-late-fix",
     IncrementalLog("tagging", 3, [[], ["A"], ["A", "B"], ["A", "C", "D"]], 1),
     F(1, 4), F(1, 3), F(2, 3), F(0), F(0), F(1), F(1)),
    # delay 2: t1 []  t2 []  t3 [X]  t4 [Y,Z]
    # edits: 2 adds + X->Y, EO 1/3.  CT: pos0 (4-3)/(4-3) = 1, pos1 0 -> 1/2.  RC 1/2.
    ("tag-d2-flip",
     IncrementalLog("tagging", 2, [[], [], ["X"], ["Y", "Z"]], 2),
     F(1, 3), F(1, 2), F(1, 2), F(0), F(0), F(1), F(1)),
    # t1 [A]  t2 [A,B]  t3 [A,B,C]  t4 [D,B,C,E]
    # edits: 4 adds + A->D, EO 1/5.  CT: pos0 (4-1)/(4-1) = 1, others 0 -> 1/4.
    # RC: only the final row is a prefix -> 1/4.
    # d1 view: [], [A], [A,B], [D,B,C], [D,B,C,E]: EO 1/5, RC 2/4.
    # d2 view: [], [], [A], [D,B], [D,B,C], [D,B,C,E]: EO 1/5, RC 3/4.
    ("tag-d0-late-revision",
     IncrementalLog("tagging", 4, [["A"], ["A", "B"], ["A", "B", "C"], ["D", "B", "C", "E"]], 0),
     F(1, 5), F(1, 4), F(1, 4), F(1, 5), F(1, 5), F(1, 2), F(3, 4)),
    # delay 1: None, x, y, x.  edits: add + 2 changes, EO 2/3.
    # CT: F0 2, stable from t4 -> (4-2)/(4-2) = 1.  RC: x ok, y wrong, x ok -> 2/3.
    # d1 view: None, None, y, x, x -> EO 1/2, RC 2/3.  d2: None x3, x, x, x -> 0, 1.
    ("cls-d1-flip-flop",
     IncrementalLog("classification", 3, [None, "x", "y", "x"], 1),
     F(2, 3), F(1), F(2, 3), F(1, 2), F(0), F(2, 3), F(1)),
    # delay 2, stable: None, None, p, p -> EO 0, CT 0, RC 1 in every view.
    ("cls-d2-stable",
     IncrementalLog("classification", 2, [None, None, "p", "p"], 2),
     F(0), F(0), F(1), F(0), F(0), F(1), F(1)),
    # single token: F0 == N so CT is 0 by convention.
    ("tag-d0-single",
     IncrementalLog("tagging", 1, [["Q"]], 0),
     F(0), F(0), F(1), F(0), F(0), F(1), F(1)),
]

FIELDS = ("EO", "CT", "RC", "EO_d1", "EO_d2", "RC_d1", "RC_d2")


def random_log(rng: random.Random, labels: str = "ABC", max_T: int = 8) -> IncrementalLog:
    """A well-formed log with arbitrary (not necessarily consistent) rows."""
    task = rng.choice(["tagging", "classification"])
    T = rng.randint(1, max_T)
    delay = rng.randint(0, 2)
    rows = []
    for t in range(1, T + delay + 1):
        if task == "tagging":
            n = max(0, min(t - delay, T))
            if rows and rng.random() < 0.5:  # often keep the previous row and extend it
                prev = rows[-1]
                rows.append(prev + [rng.choice(labels) for _ in range(n - len(prev))])
            else:
                rows.append([rng.choice(labels) for _ in range(n)])
        else:
            rows.append(None if t <= delay else rng.choice(labels))
    return IncrementalLog(task, T, rows, delay, id=rng.randrange(10**6))
