# Turn confusion counts into a metrics report and the emitted artifacts.

import os
import tempfile

from cropstress.evaluate import ConfusionMatrix, emit_report, metrics

# counts from a full-scale reference run of this architecture:
# 734 stressed and 401 healthy windows in the test pool
cm = ConfusionMatrix(tp=635, fn=99, fp=15, tn=386)
report = metrics(cm, scenario="reference")

print(f"accuracy          {report.accuracy:.3f}")
for name, side in (("stressed", report.stressed), ("healthy", report.healthy)):
    print(f"{name:<8}  precision {side['precision']:.3f}  recall {side['recall']:.3f}  "
          f"f1 {side['f1']:.3f}  support {side['support']}")

# degenerate denominators don't raise; they zero the ratio and set a flag
empty_side = metrics(ConfusionMatrix(tp=0, fn=4, fp=0, tn=6))
print("\nno stressed predictions ->", empty_side.flags)

# emit_report writes report.json and confusion.csv (and curves.svg when a
# training log is passed); identical reports produce identical bytes
out_dir = tempfile.mkdtemp(prefix="cropstress-report-")
paths = emit_report(report, out_dir)
for kind, path in paths.items():
    print(f"{kind}: {path} ({os.path.getsize(path)} bytes)")
