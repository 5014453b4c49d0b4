"""Running a campaign and reading its report.

The harness attacks every initially-correct sample with a per-sample seed,
so results do not depend on the number of worker threads. Reports export to
JSON and CSV and are checked against their own per-sample records.
"""

import tempfile
from pathlib import Path

import numpy as np

from spikefool import harness
from _desk import desk

net, ds = desk()
reports = []
for lam in (1.0, 2.0, 3.0):
    rep = harness.run_campaign(net, ds.x_test, ds.y_test, {"name": "spikefool", "config": {"lam": lam}},
                               seed=0, threads=2)
    reports.append(rep)
    print(f"lambda {lam}: success {rep.success_rate:.1f}%  median L0 {rep.median_l0}  "
          f"median queries {rep.median_queries}  added {rep.n_added} / removed {rep.n_removed}")

rep = reports[1]
print("\nconfusion (true label rows, adversarial label columns):")
print(np.array(rep.confusion))
print("added spikes per time bin:", rep.time_profile["added"])

out = Path(tempfile.mkdtemp())
harness.export_report(rep, out / "report.json")
harness.export_report(rep, out / "report.csv")
back = harness.load_report(out / "report.csv")
assert harness.check_report(back) and back.to_dict() == rep.to_dict()
print(f"\nreport written to {out} and read back intact")
