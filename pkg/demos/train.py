"""Two-stage training of the default model, then evaluation and a checkpoint round trip."""
import tempfile
from pathlib import Path

from msdb.datagen import SceneSpec, class_names, generate_dataset
from msdb.metrics import format_report
from msdb.model import ModelConfig, MSDBModel
from msdb.trainer import Schedule, evaluate_model, load_checkpoint, save_checkpoint, train_stage

train = generate_dataset(SceneSpec(seed=0, hands="random"), 100)
test = generate_dataset(SceneSpec(seed=1000, hands="random", palette_seed=0), 20)

model = MSDBModel(ModelConfig())
# a short schedule; the default 200 images and 20 + 50 epochs reach a mIoU near 0.33
sched = Schedule(stage1_epochs=10, stage2_epochs=20)
train_stage(1, train, model, sched)  # mask branch on background / left / right
print("seg  mIoU", round(evaluate_model(model, test, target="seg")["mean_iou"], 4))
records, opt = train_stage(2, train, model, sched, eval_samples=test)
for r in records[::4]:
    print(f"epoch {r['epoch']:2d} loss {r['loss']:.4f} mIoU {r['mean_iou']:.4f}")

report = evaluate_model(model, test)
print(format_report(report, class_names=class_names(3)))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    save_checkpoint(path, model, opt)
    back, _, _ = load_checkpoint(path)
    print("reloaded mIoU", round(evaluate_model(back, test)["mean_iou"], 4))
