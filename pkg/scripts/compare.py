"""Small DCDC net vs a parameter-matched static-conv net on the synthetic
texture task.  Prints per-epoch val accuracy per seed and the medians."""
import argparse
import statistics
import time

from dcdc.network import build_model, count_parameters, param_matched, small_spec
from dcdc.train import DataConfig, TrainConfig, make_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--lr", type=float, default=None, help="default: 0.1 scaled linearly from batch 256")
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-val", type=int, default=1000)
    args = ap.parse_args()
    lr = args.lr if args.lr is not None else 0.1 * args.batch_size / 256
    data = make_dataset(DataConfig(n_train=args.n_train, n_val=args.n_val))
    nets = {"dcdc": small_spec("dcdc")}
    nets["static"] = param_matched(nets["dcdc"])
    for name, spec in nets.items():
        print(f"{name}: {count_parameters(build_model(spec))} params")
    final = {name: [] for name in nets}
    for seed in range(args.seeds):
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=lr, seed=seed)
        for name, spec in nets.items():
            t0 = time.perf_counter()
            metrics = train(spec, cfg, data).metrics
            final[name].append(metrics[-1]["val_acc"])
            curve = " ".join(f"{m['val_acc']:.3f}" for m in metrics)
            print(f"seed {seed} {name:<7} val acc by epoch: {curve}  ({time.perf_counter() - t0:.0f}s)", flush=True)
    for name, accs in final.items():
        print(f"median final val acc {name}: {statistics.median(accs):.3f}")


if __name__ == "__main__":
    main()
