# Generate a small synthetic stressed-vs-healthy dataset and train on it.
#
# The synthetic patches separate the classes by mean color, so a few epochs
# of the quarter-width model are enough to fit them. Everything derives from
# one seed: rerunning this script reproduces the same numbers byte for byte.

import os
import tempfile

from cropstress.data import AugmentationConfig, synth_dataset
from cropstress.evaluate import confusion, metrics, predict_labels
from cropstress.model import ArchitectureConfig, build_model
from cropstress.seeding import derive_seed
from cropstress.train import TrainConfig, train

workdir = tempfile.mkdtemp(prefix="cropstress-demo-")
manifest = synth_dataset(workdir, n_train=60, n_test=20, image_size=32, seed=7)
manifest_path = os.path.join(workdir, "manifest.csv")
print(f"dataset under {workdir}: {len(manifest.split_rows('train'))} train / "
      f"{len(manifest.split_rows('test'))} test")

arch = ArchitectureConfig(input_size=(32, 32), scale_factor=0.25)
model = build_model(arch, seed=derive_seed(7, "model-init"))

config = TrainConfig(batch_size=8, epochs=5, seed=7)
model, log = train(model, manifest, manifest_path, AugmentationConfig(), config,
                   val_fraction=0.1)

print("\nepoch  train_loss  train_acc  val_loss  val_acc        lr")
for r in log.records:
    print(f"{r.epoch:>5}  {r.train_loss:>10.4f}  {r.train_acc:>9.3f}  "
          f"{r.val_loss:>8.4f}  {r.val_acc:>7.3f}  {r.lr:.6f}")

preds = predict_labels(model, manifest, manifest_path, split="test")
rows = manifest.split_rows("test")
cm = confusion([r.label for r in rows], [label for _, _, label in preds])
report = metrics(cm, scenario="demo")
print(f"\ntest accuracy {report.accuracy:.3f}  "
      f"(tp={cm.tp} fn={cm.fn} fp={cm.fp} tn={cm.tn})")
