"""Follow one image through the integer-only engine, layer by layer.

Everything after the input is integer arithmetic: weights and activations
are small codes, convolutions accumulate in 64-bit (statically proven to fit
32), and each junction requantizes with one multiplier. The trace prints the
code ranges and accumulator extremes at every step, then checks the integer
argmax against the float simulation of the same quantized network on the
whole test set.

Needs a quantized checkpoint; run 04_qat_4bit.py first (or pass --ckpt).
"""

import argparse

import numpy as np

import qatforge as qf
from qatforge import fixedpoint as fx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", default="demo_qat4.npz")
    ap.add_argument("--index", type=int, default=0)
    ap.add_argument("--data", default=None)
    args = ap.parse_args()

    ckpt = qf.load_checkpoint(args.ckpt)
    plan = qf.quant_plan(len(ckpt.net.param_layers), ckpt.config)
    model = qf.convert(ckpt.net, ckpt.scales, plan)
    data = qf.load_mnist(args.data)

    image = data.test_images[args.index:args.index + 1]
    print(f"image {args.index} (label {data.test_labels[args.index]})")
    x = fx.encode_input(image, model).codes
    print(f"input codes {x.min()}..{x.max()} "
          f"(scale {model.input_scale:.6f})")

    # replay the engine's own steps to expose the intermediate integers
    for i, layer in enumerate(model.layers):
        if layer.kind == "conv":
            acc = fx._conv_int(x, layer)
        elif layer.kind == "fc":
            acc = x.reshape(x.shape[0], -1) @ layer.weight_codes.T \
                + layer.bias_codes
        elif layer.kind == "maxpool":
            x = fx._pool_int(x, layer.size)
            print(f"  {i}: maxpool      -> codes {x.min()}..{x.max()}")
            continue
        else:
            x = x.reshape(x.shape[0], -1) if layer.kind == "flatten" else x
            continue
        if layer.act_bits:
            x = fx._requant_mult(acc, layer)
            print(f"  {i}: {layer.kind:4} acc {acc.min():>9}..{acc.max():<9} "
                  f"-> requant codes {x.min()}..{x.max()}")
        else:
            print(f"  {i}: {layer.kind:4} acc {acc.min():>9}..{acc.max():<9} "
                  f"(final, scale {layer.logit_scale:.2e})")
            logits = acc

    pred = int(np.argmax(logits))
    ref = qf.simulate_float(model, image)
    print(f"\npredicted {pred}, float simulation says {int(np.argmax(ref))}")

    preds = fx.predict(model, data.test_images)
    sim = np.concatenate([
        np.argmax(qf.simulate_float(model, data.test_images[i:i + 1000]), axis=1)
        for i in range(0, 10000, 1000)
    ])
    labels = data.test_labels.astype(np.int64)
    print(f"test set: integer engine {np.mean(preds == labels):.4f}, "
          f"agrees with float simulation on {int(np.sum(preds == sim))}/10000")


if __name__ == "__main__":
    main()
