"""Compiled inner loops of the backward soft Bellman recursion and the forward rollout.

Plain loops with a fixed summation order, so results do not depend on BLAS threading.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def soft_backward(costs, log_prior, kernel, eta):
    horizon, num_states, num_actions = costs.shape
    q = np.empty_like(costs)
    policy = np.empty_like(costs)
    value = np.empty(num_states)
    for x in range(num_states):
        for a in range(num_actions):
            q[horizon - 1, x, a] = costs[horizon - 1, x, a]
    for k in range(horizon - 1, -1, -1):
        for x in range(num_states):
            if eta > 0.0:
                top = -np.inf
                for a in range(num_actions):
                    logit = log_prior[k, x, a] - eta * q[k, x, a]
                    policy[k, x, a] = logit
                    if logit > top:
                        top = logit
                total = 0.0
                for a in range(num_actions):
                    w = np.exp(policy[k, x, a] - top)
                    policy[k, x, a] = w
                    total += w
                for a in range(num_actions):
                    policy[k, x, a] /= total
                value[x] = -(top + np.log(total)) / eta
            else:
                v = 0.0
                for a in range(num_actions):
                    p = np.exp(log_prior[k, x, a])
                    policy[k, x, a] = p
                    v += p * q[k, x, a]
                value[x] = v
        if k > 0:
            for x in range(num_states):
                for a in range(num_actions):
                    acc = 0.0
                    for y in range(num_states):
                        acc += kernel[k, x, a, y] * value[y]
                    q[k - 1, x, a] = costs[k - 1, x, a] + acc
    return q, policy, value


@njit(cache=True)
def rollout(action_probs, init_mass, kernel):
    horizon, num_states, num_actions = action_probs.shape
    out = np.empty((horizon + 1, num_states, num_actions))
    marginal = np.empty(num_states)
    for x in range(num_states):
        for a in range(num_actions):
            out[0, x, a] = init_mass[x, a]
    for k in range(horizon):
        for y in range(num_states):
            marginal[y] = 0.0
        for x in range(num_states):
            for a in range(num_actions):
                m = out[k, x, a]
                if m != 0.0:
                    for y in range(num_states):
                        marginal[y] += m * kernel[k, x, a, y]
        for y in range(num_states):
            for a in range(num_actions):
                out[k + 1, y, a] = marginal[y] * action_probs[k, y, a]
    return out
