"""Watch the quantization-error penalty pull weights onto the grid.

A vector of random weights descends on nothing but the weighted mean squared
quantization error, while the penalty strength lambda is learned at the same
time: the update on omega = log(lambda) is lambda*R - alpha, so lambda grows
exponentially while the error term is below alpha/lambda and stalls once the
two balance. By the end every weight sits on a level and lambda has grown by
orders of magnitude. No network, no data, just the mechanism.
"""

import numpy as np

import qatforge as qf

rng = np.random.default_rng(0)
delta, bits, alpha = 0.2, 4, 0.5
w = rng.normal(0.0, 0.4, size=64)
log_lam = 0.0
adam_w = qf.Adam(w.shape)
adam_om = qf.Adam(())

print(f"{'step':>5} {'R (mean sq err)':>16} {'lambda':>12} {'max |w-Q(w)|':>13}")
for step in range(3001):
    lam = np.exp(log_lam)
    r = qf.msqe_weights([w], delta, bits)
    if step % 500 == 0:
        gap = np.max(np.abs(w - qf.quantize_signed(w, delta, bits)))
        print(f"{step:>5} {r:>16.3e} {lam:>12.3e} {gap:>13.3e}")
    w += adam_w.step(lam * qf.msqe_weights_grad(w, delta, bits, w.size), 1e-3)
    log_lam += float(adam_om.step(qf.grad_log_lambda(r, alpha, lam), 1e-2))

gap = np.max(np.abs(w - qf.quantize_signed(w, delta, bits)))
print(f"\nworst distance to a level: {gap:.2e} (of a cell {delta} wide)")
print(f"lambda grew {np.exp(log_lam):.3e}x; its stationary point is "
      f"alpha/R, so growth only stops when R pins to alpha/lambda")
