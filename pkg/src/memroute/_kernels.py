"""Compiled inner loops for the episodic buffer.

The buffer is inherently sequential (each write changes what the next token
sees), so the per-token probe / route / retrieve / write loop runs here, on
plain arrays, while the differentiable recomputation of the executed
retrievals happens vectorised on the autodiff tape.

Action codes: 0 = CT only, 1 = episodic retrieval, 2 = semantic approximation.
"""

import numpy as np
from numba import njit

CT_ONLY, EPISODIC, SEMANTIC = 0, 1, 2
NOT_EXECUTED, EXECUTED, SHADOW = 0, 1, 2


@njit(cache=True)
def attention_weights(keys, valid, query, scale, out):
    """Softmax of scaled dot products over valid slots.

    Returns (max weight, argmax, log-sum-exp of the scores); an empty buffer
    gives (0, -1, -inf).
    """
    m = keys.shape[0]
    best = -np.inf
    for i in range(m):
        if valid[i]:
            s = 0.0
            for k in range(keys.shape[1]):
                s += keys[i, k] * query[k]
            s *= scale
            out[i] = s
            if s > best:
                best = s
        else:
            out[i] = 0.0
    if best == -np.inf:
        return 0.0, -1, -np.inf
    total = 0.0
    for i in range(m):
        if valid[i]:
            out[i] = np.exp(out[i] - best)
            total += out[i]
    top, arg = -1.0, -1
    for i in range(m):
        if valid[i]:
            out[i] /= total
            if out[i] > top:
                top, arg = out[i], i
    return top, arg, best + np.log(total)


@njit(cache=True)
def novelty_weight(top, lse, ref_score):
    """Largest weight once a reference entry scoring ``ref_score`` joins the softmax."""
    if top <= 0.0:
        return 0.0
    return top / (1.0 + np.exp(ref_score - lse))


@njit(cache=True)
def choose_slot(valid, counts, taus):
    """First empty slot, else the least-accessed entry (oldest on ties)."""
    for i in range(valid.shape[0]):
        if not valid[i]:
            return i
    best = 0
    for i in range(1, valid.shape[0]):
        if counts[i] < counts[best] or (counts[i] == counts[best] and taus[i] < taus[best]):
            best = i
    return best


@njit(cache=True)
def _quality(rs, ref, sigma2):
    err = 0.0
    for k in range(rs.shape[0]):
        diff = rs[k] - ref[k]
        err += diff * diff
    return np.exp(-(err / rs.shape[0]) / sigma2)


@njit(cache=True)
def memory_pass(Q, K, V, RS, z1, z2, tau, gumbel, shadow_u,
                R1, b1, R2, b2,
                bk, bv, bcache, bcount, btau, bvalid, bsrc,
                forced, use_router_noise, allow_semantic, use_q, use_shadow, use_buffer,
                retrieve_all, shadow_rate, sigma2, theta_nov, novelty_margin,
                actions, z3, z4, probs_out, q_out, qref, rE, executed, cold, written,
                evict_new, evict_old, valid0):
    B, n, d = Q.shape
    M = bk.shape[1]
    H = R1.shape[1]
    scale = 1.0 / np.sqrt(d)
    weights = np.empty(M)
    hidden = np.empty(H)
    logits = np.empty(3)
    feats = np.empty(4)
    for b in range(B):
        for i in range(M):
            valid0[b, i] = bvalid[b, i]
            evict_old[b, i] = n
            bsrc[b, i] = -1
        prev_entropy = 0.0
        for t in range(n):
            evict_new[b, t] = n
            # address probe: drives the write gate and the quality reference
            if use_buffer:
                top, arg, lse = attention_weights(bk[b], bvalid[b], Q[b, t], scale, weights)
            else:
                top, arg, lse = 0.0, -1, -np.inf
            is_cold = arg < 0
            cold[b, t] = is_cold
            if is_cold:
                for k in range(d):
                    qref[b, t, k] = 0.0
            else:
                for k in range(d):
                    qref[b, t, k] = bcache[b, arg, k]
            q_est = _quality(RS[b, t], qref[b, t], sigma2)
            z3[b, t] = q_est if use_q else 0.0
            z4[b, t] = prev_entropy
            q_out[b, t] = q_est

            if forced >= 0:
                action = forced
                for k in range(3):
                    probs_out[b, t, k] = 1.0 if k == forced else 0.0
                prev_entropy = 0.0
            else:
                feats[0] = z1[b, t]
                feats[1] = z2[b, t]
                feats[2] = z3[b, t]
                feats[3] = z4[b, t]
                for h in range(H):
                    s = b1[h]
                    for f in range(4):
                        s += feats[f] * R1[f, h]
                    hidden[h] = s if s > 0.0 else 0.0
                for a in range(3):
                    s = b2[a]
                    for h in range(H):
                        s += hidden[h] * R2[h, a]
                    logits[a] = s
                n_act = 3 if allow_semantic else 2
                mx = logits[0]
                for a in range(1, n_act):
                    if logits[a] > mx:
                        mx = logits[a]
                total = 0.0
                for a in range(n_act):
                    probs_out[b, t, a] = np.exp(logits[a] - mx)
                    total += probs_out[b, t, a]
                entropy = 0.0
                for a in range(n_act):
                    p = probs_out[b, t, a] / total
                    probs_out[b, t, a] = p
                    if p > 0.0:
                        entropy -= p * np.log(p)
                if not allow_semantic:
                    probs_out[b, t, 2] = 0.0
                prev_entropy = entropy
                action = 0
                best = -np.inf
                for a in range(n_act):
                    s = logits[a] + (gumbel[b, t, a] if use_router_noise else 0.0)
                    if s > best:
                        best, action = s, a
            actions[b, t] = action

            run = 0
            if use_buffer:
                if action == EPISODIC or retrieve_all:
                    run = EXECUTED
                elif use_shadow and shadow_u[b, t] < shadow_rate:
                    run = SHADOW
            executed[b, t] = run
            if run != NOT_EXECUTED:
                if is_cold:
                    for k in range(d):
                        rE[b, t, k] = 0.0
                else:
                    for k in range(d):
                        s = 0.0
                        for i in range(M):
                            if bvalid[b, i]:
                                s += weights[i] * bv[b, i, k]
                        rE[b, t, k] = s
                    for k in range(d):
                        bcache[b, arg, k] = rE[b, t, k]
                    if run == EXECUTED:
                        bcount[b, arg] += 1
                for k in range(d):
                    qref[b, t, k] = rE[b, t, k]
                q_out[b, t] = _quality(RS[b, t], rE[b, t], sigma2)

            # novelty-gated write
            wrote = False
            # the reference entry is the token's own key, less a margin
            self_score = 0.0
            for k in range(d):
                self_score += Q[b, t, k] * K[b, t, k]
            ref = self_score * scale - novelty_margin
            if use_buffer and 1.0 - novelty_weight(top, lse, ref) > theta_nov:
                slot = choose_slot(bvalid[b], bcount[b], btau[b])
                if bvalid[b, slot]:
                    if bsrc[b, slot] >= 0:
                        evict_new[b, bsrc[b, slot]] = t
                    else:
                        evict_old[b, slot] = t
                for k in range(d):
                    bk[b, slot, k] = K[b, t, k]
                    bv[b, slot, k] = V[b, t, k]
                    bcache[b, slot, k] = V[b, t, k]
                bcount[b, slot] = 0
                btau[b, slot] = tau[b, t]
                bvalid[b, slot] = True
                bsrc[b, slot] = t
                wrote = True
            written[b, t] = wrote
