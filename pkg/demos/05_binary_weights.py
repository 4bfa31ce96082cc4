"""Push weights all the way to one bit per weight.

One-bit quantization keeps only the sign: the layer's weights collapse to
{-delta, +delta} with delta learned per layer. From scratch this is a hard
optimization, so the usual recipe is to fine-tune from a float checkpoint
(03_float_baseline.py writes one; without --init this script trains a quick
float model first). Activations stay at 8 bits.
"""

import argparse

import numpy as np

import qatforge as qf


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--init", default=None,
                    help="float checkpoint to fine-tune from")
    ap.add_argument("--data", default=None)
    args = ap.parse_args()

    data = qf.load_mnist(args.data)
    if not args.full:
        data = qf.MnistSet(data.train_images[:12000], data.train_labels[:12000],
                           data.test_images, data.test_labels)

    if args.init:
        net = qf.load_checkpoint(args.init).net
    else:
        print("no --init given, training a short float baseline first")
        warm = qf.TrainConfig(mode="float", epochs=2)
        net = qf.build_lenet(np.random.default_rng(warm.seed))
        net = qf.train(net, data, warm).net

    cfg = qf.TrainConfig(mode="qat", weight_bits=1, act_bits=8,
                         epochs=args.epochs, lr=3e-4,
                         lr_schedule=((args.epochs * 2 // 3, 0.1),))
    result = qf.train(net, data, cfg)

    print(f"\ntest accuracy with sign-only weights: {result.final_accuracy:.4f}")
    for l, layer in enumerate(result.net.param_layers):
        values = np.unique(layer.W)
        print(f"  layer {l}: weight values {values}")


if __name__ == "__main__":
    main()
