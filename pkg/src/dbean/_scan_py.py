"""Numpy fallback for the recurrence scans in ``_scan.pyx`` (same signatures)."""

import numpy as np


def scan_forward(pre, w_h, out):
    if pre.shape[0] == 0:
        return
    np.tanh(pre[0], out=out[0])
    w_t = w_h.T
    for t in range(1, pre.shape[0]):
        np.tanh(pre[t] + out[t - 1] @ w_t, out=out[t])


def scan_backward(states, grad_states, w_h, grad_pre, carry):
    carry[...] = 0
    for t in range(states.shape[0] - 1, -1, -1):
        y = states[t]
        np.multiply(grad_states[t] + carry, 1 - y * y, out=grad_pre[t])
        if t > 0:
            np.matmul(grad_pre[t], w_h, out=carry)
