"""The full small-model pipeline: prune 90%, quantize survivors to 3 bits,
entropy-code the result, and check nothing of value was lost.

Pruning is an L2 penalty applied only below the moving magnitude percentile,
so small weights are pushed to zero while the rest train on; at the end
everything under the threshold is masked hard. The quantization stage then
runs on the survivors (masks stay frozen). The archive stores gaps between
nonzeros plus Huffman-coded levels, and decodes back to the exact same
network.

Defaults are sized for a quick run (subset, 0.9). The headline numbers come
from --full --ratio 0.99 --prune-epochs 15 --qat-epochs 15 with a proper
--init checkpoint, which is what the acceptance suite measures.
"""

import argparse

import numpy as np

import qatforge as qf


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ratio", type=float, default=0.9)
    ap.add_argument("--prune-epochs", type=int, default=4)
    ap.add_argument("--qat-epochs", type=int, default=4)
    ap.add_argument("--bits", type=int, default=3)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--init", default=None, help="float checkpoint to start from")
    ap.add_argument("--data", default=None)
    ap.add_argument("--out", default="demo_model.qzip")
    args = ap.parse_args()

    data = qf.load_mnist(args.data)
    if not args.full:
        data = qf.MnistSet(data.train_images[:12000], data.train_labels[:12000],
                           data.test_images, data.test_labels)

    if args.init:
        net = qf.load_checkpoint(args.init).net
    else:
        print("no --init given, training a short float baseline first")
        net = qf.build_lenet(np.random.default_rng(0))
        net = qf.train(net, data, qf.TrainConfig(mode="float", epochs=2)).net

    n_total = sum(l.W.size for l in net.param_layers)
    print(f"\n--- stage 1: prune {args.ratio:.0%} of {n_total} weights")
    cfg = qf.TrainConfig(mode="prune", prune_ratio=args.ratio,
                         epochs=args.prune_epochs, lr=1e-4)
    pruned = qf.train(net, data, cfg)
    print(f"kept {n_total - int(sum((~m).sum() for m in pruned.prune_mask))} "
          f"weights, accuracy {pruned.final_accuracy:.4f}")

    print(f"\n--- stage 2: quantize survivors to {args.bits} bits")
    qcfg = qf.TrainConfig(mode="qat", weight_bits=args.bits,
                          quantize_acts=False, epochs=args.qat_epochs, lr=3e-4)
    result = qf.train(pruned.net, data, qcfg, masks=pruned.prune_mask)
    print(f"accuracy {result.final_accuracy:.4f}")

    print("\n--- stage 3: entropy-code")
    plan = qf.quant_plan(len(result.net.param_layers), qcfg)
    archive, _ = qf.encode_model(result.net, result.prune_mask,
                                 result.scales, plan)
    with open(args.out, "wb") as f:
        f.write(archive)
    rep = qf.report(archive, [m.astype(np.float64) for m in result.prune_mask])
    print(rep)

    decoded = qf.decode_model(archive).to_network()
    acc = qf.evaluate(decoded, data.test_images,
                      data.test_labels.astype(np.int64),
                      qcfg.resolved_input_scale())
    print(f"\ndecoded archive accuracy {acc:.4f} -> {args.out} "
          f"({len(archive)} bytes)")


if __name__ == "__main__":
    main()
