"""Recurrent sampling policy over token libraries.

A single GRU cell emits one categorical distribution per token. Its input at
each step is one-hot(parent) concatenated with one-hot(sibling) of the slot
being filled (an extra "empty" index is used at the root and for first
children). Structural constraints are applied as masks before the softmax.

Gradients of ``sum_b w_b log p(tau_b) + lam * sum_b H(tau_b)`` are computed by
backpropagation through time and can be checked against finite differences
with :func:`policy_gradient_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Expression, TokenLibrary

__all__ = ["Policy", "Batch", "Adam", "policy_gradient_check"]


class _Masker:
    """Precomputed mask rows for the structural constraints."""

    def __init__(self, lib: TokenLibrary):
        self.lib = lib
        L = len(lib)
        self.L = L
        self.empty = L
        toks = lib.tokens
        self.arity = np.array([t.arity for t in toks])
        self.is_const = np.array([t.kind == "const" for t in toks])
        self.is_unary = np.array([t.kind == "unary" for t in toks] + [False])
        self.is_binary = np.array([t.kind == "binary" for t in toks] + [False])
        self.is_leaf = self.arity == 0
        # arity_ok[k]: tokens whose arity <= k, k in 0..2
        self.arity_ok = np.array([self.arity <= k for k in range(3)])
        # parent_ok[p]: tokens allowed as a child of parent p
        parent_ok = np.ones((L + 1, L), dtype=bool)
        for p, tok in enumerate(toks):
            if tok.kind == "unary":
                parent_ok[p, p] = False
                parent_ok[p, self.is_const] = False
        self.parent_ok = parent_ok
        # x - x and x / x are wasted structure: forbid repeating a leaf as the right operand
        self.cancels = np.array([t.name in ("-", "/") for t in toks] + [False])
        self.plain_leaf = np.append(self.is_leaf & ~self.is_const, False)

    def masks(self, length, open_slots, n_const, parent, sibling):
        limit = np.clip(self.lib.max_length - length - open_slots, 0, 2)
        m = self.arity_ok[limit] & self.parent_ok[parent]
        no_const = n_const >= self.lib.max_constants
        # two constant children under one binary operator fold to a constant
        sib_const = np.zeros_like(no_const)
        has_sib = sibling < self.L
        sib_const[has_sib] = self.is_const[sibling[has_sib]]
        no_const |= sib_const & self.is_binary[parent]
        m &= ~(no_const[:, None] & self.is_const[None, :])
        rows = np.flatnonzero(has_sib & self.cancels[parent] & self.plain_leaf[sibling])
        if rows.size:
            m[rows, sibling[rows]] = False
        empty = ~m.any(axis=1)
        if empty.any():
            fallback = self.is_leaf & ~self.is_const
            if not fallback.any():
                fallback = self.is_leaf
            m[empty] = fallback
        return m


@dataclass
class Batch:
    """Sampled token indices plus everything needed to replay the forward pass."""

    actions: np.ndarray   # (N, T) int, -1 after the end
    parents: np.ndarray   # (N, T) int
    siblings: np.ndarray  # (N, T) int
    masks: np.ndarray     # (N, T, L) bool
    lengths: np.ndarray   # (N,)
    logp: np.ndarray      # (N,) accumulated during sampling

    def __len__(self):
        return self.actions.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        T = max(int(self.lengths[idx].max()), 1) if idx.size else 1
        return Batch(self.actions[idx, :T], self.parents[idx, :T], self.siblings[idx, :T],
                     self.masks[idx, :T], self.lengths[idx], self.logp[idx])

    def token_ids(self, i: int) -> tuple:
        return tuple(int(a) for a in self.actions[i, : self.lengths[i]])


_PARAM_NAMES = ("W", "U", "b", "Wo", "bo")


class Policy:
    """GRU policy with parameters W (3H x 2(L+1)), U (3H x H), b (3H), Wo (L x H), bo (L)."""

    def __init__(self, lib: TokenLibrary, hidden_size: int = 32, seed=None):
        self.lib = lib
        self.hidden_size = H = int(hidden_size)
        self.masker = _Masker(lib)
        L = len(lib)
        rng = np.random.default_rng(seed)
        I = 2 * (L + 1)
        s_in = np.sqrt(1.0 / (2 + H))
        s_h = np.sqrt(1.0 / H)
        self.params = {
            "W": rng.uniform(-s_in, s_in, (3 * H, I)),
            "U": rng.uniform(-s_h, s_h, (3 * H, H)),
            "b": np.zeros(3 * H),
            "Wo": rng.uniform(-s_h, s_h, (L, H)),
            "bo": np.zeros(L),
        }

    # --- core cell ----------------------------------------------------------

    def _cell(self, h, parent, sibling):
        P = self.params
        H = self.hidden_size
        L1 = len(self.lib) + 1
        Wx = P["W"][:, parent].T + P["W"][:, L1 + sibling].T + P["b"]
        Uh = h @ P["U"][: 2 * H].T
        az = Wx[:, :H] + Uh[:, :H]
        ar = Wx[:, H: 2 * H] + Uh[:, H:]
        z = 1.0 / (1.0 + np.exp(-az))
        r = 1.0 / (1.0 + np.exp(-ar))
        rh = r * h
        n = np.tanh(Wx[:, 2 * H:] + rh @ P["U"][2 * H:].T)
        h_new = (1.0 - z) * n + z * h
        return h_new, (h, z, r, n, rh)

    def _probs(self, h, mask):
        logits = h @ self.params["Wo"].T + self.params["bo"]
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    # --- sampling -----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        mk = self.masker
        L = len(self.lib)
        T = self.lib.max_length
        E = mk.empty
        actions = np.full((n, T), -1, dtype=int)
        parents = np.full((n, T), E, dtype=int)
        siblings = np.full((n, T), E, dtype=int)
        masks = np.zeros((n, T, L), dtype=bool)
        logp = np.zeros(n)
        lengths = np.zeros(n, dtype=int)
        if n == 0:
            return Batch(actions, parents, siblings, masks, lengths, logp)
        # explicit stacks: token, children remaining, last child
        st_tok = np.full((n, T + 1), E, dtype=int)
        st_rem = np.zeros((n, T + 1), dtype=int)
        st_last = np.full((n, T + 1), E, dtype=int)
        depth = np.zeros(n, dtype=int)
        open_slots = np.ones(n, dtype=int)
        n_const = np.zeros(n, dtype=int)
        alive = np.ones(n, dtype=bool)
        h = np.zeros((n, self.hidden_size))
        rows = np.arange(n)
        for t in range(T):
            idx = rows[alive]
            if idx.size == 0:
                break
            d = depth[idx]
            top = np.maximum(d - 1, 0)
            par = np.where(d > 0, st_tok[idx, top], E)
            sib = np.where(d > 0, st_last[idx, top], E)
            m = mk.masks(np.full(idx.size, t), open_slots[idx], n_const[idx], par, sib)
            h_new, _ = self._cell(h[idx], par, sib)
            h[idx] = h_new
            p = self._probs(h_new, m)
            c = p.cumsum(axis=1)
            u = rng.random(idx.size)[:, None] * c[:, -1:]
            a = np.minimum((c < u).sum(axis=1), L - 1)
            # guard against landing on a masked entry through rounding
            bad = ~m[np.arange(idx.size), a]
            if bad.any():
                a[bad] = np.argmax(m[bad], axis=1)
            logp[idx] += np.log(p[np.arange(idx.size), a])
            actions[idx, t] = a
            parents[idx, t] = par
            siblings[idx, t] = sib
            masks[idx, t] = m
            lengths[idx] += 1
            n_const[idx] += mk.is_const[a]
            ar = mk.arity[a]
            open_slots[idx] += ar - 1
            # record as child of current top
            has = d > 0
            hi = idx[has]
            st_rem[hi, top[has]] -= 1
            st_last[hi, top[has]] = a[has]
            push = ar > 0
            pi = idx[push]
            st_tok[pi, depth[pi]] = a[push]
            st_rem[pi, depth[pi]] = ar[push]
            st_last[pi, depth[pi]] = E
            depth[pi] += 1
            # pop completed operators
            while True:
                full = (depth > 0) & alive
                full[full] = st_rem[rows[full], depth[full] - 1] == 0
                if not full.any():
                    break
                depth[full] -= 1
            alive &= open_slots > 0
        return Batch(actions, parents, siblings, masks, lengths, logp)

    def to_expressions(self, batch: Batch) -> list[Expression]:
        toks = self.lib.tokens
        return [Expression(tuple(toks[a] for a in batch.token_ids(i))) for i in range(len(batch))]

    def sample_batch(self, n: int, rng: np.random.Generator) -> list[Expression]:
        return self.to_expressions(self.sample(n, rng))

    # --- replay and gradient -----------------------------------------------

    def _replay(self, batch: Batch):
        N, T = batch.actions.shape
        h = np.zeros((N, self.hidden_size))
        cache = []
        for t in range(T):
            h, c = self._cell(h, batch.parents[:, t], batch.siblings[:, t])
            m = batch.masks[:, t]
            m = np.where(m.any(axis=1, keepdims=True), m, True)
            p = self._probs(h, m)
            cache.append((c, h, p, m))
        return cache

    def log_prob(self, batch: Batch) -> np.ndarray:
        """Per-sequence log-probability recomputed from the stored actions."""
        cache = self._replay(batch)
        out = np.zeros(len(batch))
        for t, (_, _, p, _) in enumerate(cache):
            a = batch.actions[:, t]
            live = a >= 0
            out[live] += np.log(p[live, a[live]])
        return out

    def entropy(self, batch: Batch) -> np.ndarray:
        cache = self._replay(batch)
        out = np.zeros(len(batch))
        for t, (_, _, p, m) in enumerate(cache):
            live = batch.actions[:, t] >= 0
            lp = np.log(np.where(m, p, 1.0))
            out[live] -= (p * lp).sum(axis=1)[live]
        return out

    def objective(self, batch: Batch, weights, entropy_weight: float = 0.0) -> float:
        w = np.asarray(weights, dtype=float)
        val = float(w @ self.log_prob(batch))
        if entropy_weight:
            val += entropy_weight * float(self.entropy(batch).sum())
        return val

    def gradient(self, batch: Batch, weights, entropy_weight: float = 0.0) -> dict:
        """Gradient of ``sum_b w_b log p_b + entropy_weight * sum_b H_b``."""
        P = self.params
        H = self.hidden_size
        L1 = len(self.lib) + 1
        w = np.asarray(weights, dtype=float)
        cache = self._replay(batch)
        g = {k: np.zeros_like(v) for k, v in P.items()}
        N, T = batch.actions.shape
        dh = np.zeros((N, H))
        rows = np.arange(N)
        for t in range(T - 1, -1, -1):
            (h_prev, z, r, n, rh), h, p, m = cache[t]
            a = batch.actions[:, t]
            live = (a >= 0).astype(float)
            dlog = -p * w[:, None]
            dlog[rows, np.maximum(a, 0)] += w
            if entropy_weight:
                lp = np.log(np.where(m, p, 1.0))
                ent = -(p * lp).sum(axis=1, keepdims=True)
                dlog += entropy_weight * (-p * (lp + ent))
            dlog *= live[:, None]
            g["Wo"] += dlog.T @ h
            g["bo"] += dlog.sum(axis=0)
            dh = dh + dlog @ P["Wo"]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dh_prev = dh * z
            dan = dn * (1.0 - n * n)
            Un = P["U"][2 * H:]
            g["U"][2 * H:] += dan.T @ rh
            drh = dan @ Un
            dr = drh * h_prev
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            da = np.concatenate([daz, dar, dan], axis=1)
            g["U"][: 2 * H] += np.concatenate([daz, dar], axis=1).T @ h_prev
            dh_prev += np.concatenate([daz, dar], axis=1) @ P["U"][: 2 * H]
            g["b"] += da.sum(axis=0)
            np.add.at(g["W"].T, batch.parents[:, t], da)
            np.add.at(g["W"].T, L1 + batch.siblings[:, t], da)
            dh = dh_prev
        return g

    # --- parameter vector helpers --------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _PARAM_NAMES])

    def set_flat(self, v: np.ndarray) -> None:
        i = 0
        for k in _PARAM_NAMES:
            size = self.params[k].size
            self.params[k] = v[i: i + size].reshape(self.params[k].shape).copy()
            i += size

    @staticmethod
    def flatten(g: dict) -> np.ndarray:
        return np.concatenate([g[k].ravel() for k in _PARAM_NAMES])

    def state_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.params.items()}


class Adam:
    """Adam ascent on a Policy's parameter dict."""

    def __init__(self, params: dict, lr: float = 5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def ascend(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            params[k] = params[k] + self.lr * mh / (np.sqrt(vh) + self.eps)


def policy_gradient_check(policy: Policy, batch: Batch, weights=None,
                          entropy_weight: float = 0.0, h: float = 1e-5,
                          floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter is ``|g_a - g_fd| / max(|g_a| + |g_fd|, floor)``.
    """
    if weights is None:
        weights = np.ones(len(batch))
    ga = Policy.flatten(policy.gradient(batch, weights, entropy_weight))
    theta = policy.get_flat()
    gn = np.zeros_like(theta)
    try:
        for i in range(theta.size):
            tp = theta.copy()
            tp[i] += h
            policy.set_flat(tp)
            fp = policy.objective(batch, weights, entropy_weight)
            tp[i] -= 2 * h
            policy.set_flat(tp)
            fm = policy.objective(batch, weights, entropy_weight)
            gn[i] = (fp - fm) / (2 * h)
    finally:
        policy.set_flat(theta)
    rel = np.abs(ga - gn) / np.maximum(np.abs(ga) + np.abs(gn), floor)
    return float(rel.max()) if rel.size else 0.0
