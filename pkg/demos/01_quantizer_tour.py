"""A tour of the quantization primitives, no training involved.

Everything downstream rests on three small functions: rounding half away
from zero, the clipped uniform quantizer, and the nearest-power-of-two
rounding used when scales must become shifts. This script prints what each
does at the interesting points: mid-cell values, cell boundaries, the clip
rails, and the one-bit special case that has no zero level.
"""

import numpy as np

import qatforge as qf

delta, bits = 0.25, 4

print(f"signed quantizer, delta={delta}, bits={bits}")
print(f"  levels run {-2**(bits-1)*delta} .. {(2**(bits-1)-1)*delta}")
xs = np.array([0.30, 0.375, -0.375, 1.9, -2.5, 0.0])
codes = qf.code_signed(xs, delta, bits)
for x, k in zip(xs, codes):
    print(f"  {x:+.3f} -> code {int(k):+d} -> {k * delta:+.3f}")

print("\nhalf-integer multiples of delta are cell boundaries; ties go away "
      "from zero:")
print("  0.375 ->", float(qf.quantize_signed(0.375, delta, bits)),
      "  -0.375 ->", float(qf.quantize_signed(-0.375, delta, bits)))

bounds = qf.cell_boundaries(delta, bits)
print(f"\n{bounds.size} boundaries for {bits} bits:", bounds[:4], "...")

print("\none-bit weights keep only the sign (zero counts as positive):")
for x in (0.7, -0.01, 0.0):
    print(f"  {x:+.2f} -> {float(qf.quantize_signed(x, 0.3, 1)):+.2f}")

print("\nunsigned activation quantizer clips negatives to zero:")
print("  ", qf.quantize_unsigned(np.array([-1.0, 0.3, 9.9]), 0.5, 3))

print("\nnearest power of two (ties at 3*2^k round up):")
for x in (40.0, 0.7, 3.0, 0.375):
    print(f"  {x:7.3f} -> {qf.round_pow2(x):.3f}")

# the training-time pass bands: gradients flow only where True
w = np.array([-2.2, -2.0, 0.0, 1.7, 1.9])
print("\nstraight-through pass band for the weights above at "
      f"delta={delta}, bits={bits}:")
print("  ", qf.ste_weight_passmask(w, delta, bits))
