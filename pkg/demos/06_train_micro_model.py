"""Train the micro vision model and run a small inner-design ablation.

The classifier is patch embed -> depth x [CPE + TTT + MLP] -> pooling -> head,
with one depthwise-conv inner head and gated-linear heads elsewhere. Training
uses real CIFAR-10 binaries when available (TTTLAB_CIFAR10 or
./data/cifar-10-batches-bin); otherwise a generated 10-class set in the same
binary format. The ablation trains on the synthetic key/value recall task.
"""

from tttlab.harness import RunConfig, cmd_ablate, cmd_train

rc = RunConfig(task="cifar", seed=0, out_dir="runs/micro-demo", epochs=3,
               train_size=1500, val_size=400, batch_size=64,
               lr=1e-3, weight_decay=0.05, warmup_epochs=1)
report = cmd_train(rc)
src = "synthetic fallback" if report["synthetic_data"] else "real CIFAR-10"
print(f"\ntrained on {src}")
for epoch, loss, acc, wall in report["rows"]:
    print(f"epoch {epoch}: train loss {loss:.3f}  val top-1 {acc:.3f}  ({wall:.0f}s)")
print(f"checkpoint: {report['checkpoint']}")

print("\nrecall-task ablation over inner loss x inner lr (3 seeds):")
ab = RunConfig(task="recall", out_dir="runs/micro-demo/ablate", epochs=12,
               train_size=512, val_size=128, batch_size=64, dim=32, heads=2,
               lr=5e-3, weight_decay=0.01, warmup_epochs=2, recall_seq=9,
               recall_keys=16, threads=4)
grid = {"inner_loss": ["mse", "mae"], "inner_lr": [0.1, 1.0], "seeds": [0, 1, 2]}
result = cmd_ablate(ab, grid)
print(f"{'config':>32s} {'params':>7s} {'MFLOP':>7s} {'tok/s':>9s} {'acc':>6s} {'!':>2s}")
for row in result["rows"]:
    print(f"{row['config']:>32s} {row['params']:>7d} {row['flops'] / 1e6:>7.2f} "
          f"{row['throughput']:>9} {row['metric']:>6} {row['status']:>2s}")
