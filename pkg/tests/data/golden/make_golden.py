"""Regenerate the expected address flows with the loop-based oracle.

Run from this directory: ``python make_golden.py``.
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

here = Path(__file__).resolve().parent
sys.path.insert(0, str(here.parent.parent))
import oracles  # noqa: E402

YEARS = (2015, 2016)

people = defaultdict(list)
seen = {}
with open(here / "records.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        people[row["person_id"]].append((row["address_id"], row["kind"], row["effective_date"] or None))
        seen[row["person_id"]] = (row["first_seen"] or None, row["last_seen"] or None)

for year in YEARS:
    acc = defaultdict(float)
    for pid, addrs in sorted(people.items()):
        dists = oracles.monthly_distributions(addrs, *seen[pid])
        for key, v in oracles.acs_tuples(dists, year).items():
            acc[key] += v
    with open(here / f"expected_{year}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "dest", "value"])
        for (o, d), v in sorted(acc.items()):
            if v > 0:
                w.writerow([o, d, "%.17g" % v])
