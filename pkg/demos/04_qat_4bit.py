"""Quantization-aware training at 4-bit weights and activations, from scratch.

The run optimizes the task loss plus lambda times the weight quantization
error, with lambda itself learned: its log moves by (lambda*R - alpha), so
while the error term is small lambda climbs and squeezes the weights onto
the grid. Per-layer scales are learned too. Watch three things in the epoch
lines: lambda grows by orders of magnitude, R collapses toward zero, and
accuracy stays put.

At the end the weights are snapped to their exact levels (a no-op by then,
numerically) and the distance they had to move is printed; that residual is
what training achieved on its own.
"""

import argparse

import numpy as np

import qatforge as qf


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--data", default=None)
    ap.add_argument("--out", default="demo_qat4.npz")
    args = ap.parse_args()

    data = qf.load_mnist(args.data)
    if not args.full:
        data = qf.MnistSet(data.train_images[:12000], data.train_labels[:12000],
                           data.test_images, data.test_labels)

    cfg = qf.TrainConfig(mode="qat", weight_bits=args.bits, act_bits=args.bits,
                         epochs=args.epochs,
                         lr_schedule=((args.epochs * 2 // 3, 0.1),))
    net = qf.build_lenet(np.random.default_rng(cfg.seed))
    result = qf.train(net, data, cfg)

    d = result.diagnostics
    lam = result.log.column("lam")
    print(f"\ntest accuracy {result.final_accuracy:.4f}")
    print(f"lambda: {lam[0]:.2f} -> {lam[-1]:.3e}")
    print(f"pre-snap weight error mean {d['weight_msqe']:.3e}, "
          f"worst weight {d['max_err_over_delta']:.1e} cells from a level")
    for l, scale in enumerate(result.scales.weight_scales):
        print(f"  layer {l}: delta = {scale:.5f}")
    qf.save_checkpoint(args.out, result.net, result.scales, result.reg, cfg)
    print(f"checkpoint -> {args.out}  (feed it to 08_fixed_point_trace.py)")


if __name__ == "__main__":
    main()
