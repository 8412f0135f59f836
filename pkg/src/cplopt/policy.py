"""Policies mapping algorithm state to cut-generating parameters.

Two modes share one interface. The recurrent mode runs the last M state
encodings through an LSTM cell, two tanh layers, and K affine heads; each
head's output splits into n disjunction scores (argmax over fractional
integer variables picks pi, with eta = floor of the chosen coordinate) and
a normalization block mapped through a softmax scaled to mean one. The
static mode stores the normalization weights directly in a per-(round,
head) table, picks disjunctions by the most-fractional rule, and accepts
explicit per-entry overrides; its initial table reproduces the trivial
normalization exactly, which a softmax could not.

Network sizes are fixed at the largest pool the run can produce
(m_hat_max = m + R*K); smaller pools use a slice of each half of the
normalization block, so the trivial and standard weights stay expressible
at any fill. All weights draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).

The backward pass is manual and follows the training estimator: cotangents
arrive on D_diag only (the argmax and floor are piecewise constant), and
the chain stops at the encoding.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .cgp import CutGenParams, trivial_normalization
from .model import EPS_INT, AlgoState

CKPT_FORMAT = "cplopt-ckpt-v1"


@dataclass(frozen=True)
class PolicySizes:
    """Shape configuration shared by both modes; p is echoed into every
    emitted CutGenParams."""

    n: int
    m: int
    rounds: int
    heads: int
    hidden: int = 64
    history: int = 1
    p: float = 1.0
    mode: str = "recurrent"

    def __post_init__(self):
        if min(self.n, self.m, self.rounds, self.heads) < 1:
            raise ValueError("n, m, rounds, heads must all be positive")
        if self.hidden < 1:
            raise ValueError("hidden size must be positive")
        if self.history < 1:
            raise ValueError("history window must be at least 1")
        if self.mode not in ("recurrent", "static"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def m_hat_max(self) -> int:
        return self.m + self.rounds * self.heads

    @property
    def encoding_dim(self) -> int:
        return 2 * self.n + 4

    @property
    def width_max(self) -> int:
        return 2 * (self.m_hat_max + 1)

    @property
    def fc1_out(self) -> int:
        return 4 * (self.m_hat_max + 1) + 2 * self.n

    @property
    def fc2_out(self) -> int:
        return 2 * (self.m_hat_max + 1) + self.n

    @property
    def head_out(self) -> int:
        return self.n + self.width_max


@dataclass
class PolicyParams:
    sizes: PolicySizes
    arrays: dict[str, np.ndarray]
    # static-mode only: explicit (pi, eta) per (round, head); the default
    # is the most-fractional rule evaluated at act time
    overrides: dict[tuple[int, int], tuple[np.ndarray, float]] = field(
        default_factory=dict)

    @property
    def mode(self) -> str:
        return self.sizes.mode


@dataclass
class NoParams:
    """Marker for a head that cannot act (no fractional integer variable,
    or a degenerate static normalization row)."""

    reason: str = "no fractional integer variable"


@dataclass
class StateEncoding:
    """Fixed-length features of one algorithm state: bound, candidate,
    per-variable fractionality (zero on continuous variables), pool
    violation summary at the candidate, and pool fill fraction."""

    vector: np.ndarray

    @classmethod
    def zero(cls, n: int) -> "StateEncoding":
        return cls(np.zeros(2 * n + 4))


def encode(history, integer_mask, capacity: int,
           window: int) -> list[StateEncoding]:
    """Encode the last `window` states, oldest first, zero-padded in front."""
    if window < 1:
        raise ValueError("window must be at least 1")
    integer_mask = np.asarray(integer_mask, dtype=bool)
    n = integer_mask.size
    states = list(history)[-window:]
    out: list[StateEncoding] = []
    for _ in range(window - len(states)):
        out.append(StateEncoding.zero(n))
    for s in states:
        v = np.zeros(2 * n + 4)
        v[0] = s.objective
        v[1:n + 1] = s.candidate
        frac = np.abs(s.candidate - np.round(s.candidate))
        v[n + 1:2 * n + 1] = np.where(integer_mask, frac, 0.0)
        if len(s.pool_h):
            viol = s.pool_G @ s.candidate - s.pool_h
            v[2 * n + 1] = float(viol.mean())
            v[2 * n + 2] = float(viol.max())
            v[2 * n + 3] = len(s.pool_h) / capacity if capacity else 0.0
        out.append(StateEncoding(v))
    return out


def _norm_slice_positions(m_hat: int, m_hat_max: int) -> np.ndarray:
    """Positions of the live normalization entries inside a width_max block:
    the first m_hat row scores of each half plus that half's disjunction
    score, preserving the (rows..., disjunction) layout at any fill."""
    if not 1 <= m_hat <= m_hat_max:
        raise ValueError(f"m_hat {m_hat} outside [1, {m_hat_max}]")
    u = np.append(np.arange(m_hat), m_hat_max)
    v = u + (m_hat_max + 1)
    return np.concatenate([u, v])


def most_fractional_indices(x_bar, integer_indices, count: int = 1) -> list[int]:
    """Integer coordinates ranked by fractionality, descending, ties toward
    the lower index; coordinates within EPS_INT of an integer are dropped."""
    x_bar = np.asarray(x_bar, dtype=float)
    frac = np.abs(x_bar - np.round(x_bar))
    ranked = sorted((i for i in integer_indices if frac[i] > EPS_INT),
                    key=lambda i: (-frac[i], i))
    return ranked[:count]


def init_params(seed: int, sizes: PolicySizes) -> PolicyParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights in recurrent
    mode, the exact trivial normalization in every static table row."""
    if sizes.mode == "static":
        row = trivial_normalization(sizes.m_hat_max)
        table = np.tile(row, (sizes.rounds, sizes.heads, 1))
        return PolicyParams(sizes, {"D_table": table})
    rng = np.random.default_rng(seed)
    H, E = sizes.hidden, sizes.encoding_dim

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    arrays = {
        "W_x": uniform((4 * H, E), E),
        "W_h": uniform((4 * H, H), H),
        "b": uniform(4 * H, H),
        "W1": uniform((sizes.fc1_out, H), H),
        "b1": uniform(sizes.fc1_out, H),
        "W2": uniform((sizes.fc2_out, sizes.fc1_out), sizes.fc1_out),
        "b2": uniform(sizes.fc2_out, sizes.fc1_out),
        "W_heads": uniform((sizes.heads, sizes.head_out, sizes.fc2_out),
                           sizes.fc2_out),
        "b_heads": uniform((sizes.heads, sizes.head_out), sizes.fc2_out),
    }
    return PolicyParams(sizes, arrays)


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _lstm_forward(params: PolicyParams, inputs: list[np.ndarray]):
    """Run the cell over the encoding window from a zero state; the cache
    carries everything the backward sweep needs."""
    a = params.arrays
    H = params.sizes.hidden
    h = np.zeros(H)
    c = np.zeros(H)
    cache = []
    for x in inputs:
        pre = a["W_x"] @ x + a["W_h"] @ h + a["b"]
        i = expit(pre[:H])
        f = expit(pre[H:2 * H])
        g = np.tanh(pre[2 * H:3 * H])
        o = expit(pre[3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache.append((x, h, c, i, f, g, o, tc))
        h = o * tc
        c = c_new
    return h, cache


def _trunk_forward(params: PolicyParams, encodings: list[StateEncoding]):
    a = params.arrays
    h, lstm_cache = _lstm_forward(params, [e.vector for e in encodings])
    f1 = np.tanh(a["W1"] @ h + a["b1"])
    f2 = np.tanh(a["W2"] @ f1 + a["b2"])
    return f2, (lstm_cache, h, f1, f2)


def _head_blocks(params: PolicyParams, f2: np.ndarray, k: int, m_hat: int):
    a = params.arrays
    n = params.sizes.n
    out = a["W_heads"][k] @ f2 + a["b_heads"][k]
    positions = n + _norm_slice_positions(m_hat, params.sizes.m_hat_max)
    return out[:n], out[positions], positions


def act(params: PolicyParams, history, x_bar, integer_indices,
        m_hat: int) -> list[CutGenParams | NoParams]:
    """Produce one set of cut parameters per head at the current point.

    Recurrent heads pick pi by masked argmax of their disjunction scores
    and map the sliced normalization block through softmax times 2(m_hat+1).
    Static heads read their table row and take the k-th most fractional
    integer variable unless an explicit override is registered.
    """
    sizes = params.sizes
    x_bar = np.asarray(x_bar, dtype=float).ravel()
    if x_bar.shape != (sizes.n,):
        raise ValueError(f"x_bar has shape {x_bar.shape}, expected ({sizes.n},)")
    width = 2 * (m_hat + 1)
    frac = np.abs(x_bar - np.round(x_bar))
    fractional = [i for i in integer_indices if frac[i] > EPS_INT]

    if sizes.mode == "static":
        round_index = _table_row(sizes, history)
        ranked = most_fractional_indices(x_bar, integer_indices, sizes.heads)
        positions = _norm_slice_positions(m_hat, sizes.m_hat_max)
        outputs: list[CutGenParams | NoParams] = []
        for k in range(sizes.heads):
            override = params.overrides.get((round_index, k))
            if override is not None:
                pi, eta = override
                pi = np.asarray(pi, dtype=float)
            elif k < len(ranked):
                j = ranked[k]
                pi = np.zeros(sizes.n)
                pi[j] = 1.0
                eta = float(np.floor(x_bar[j]))
            else:
                outputs.append(NoParams())
                continue
            row = np.maximum(params.arrays["D_table"][round_index, k], 0.0)
            D = row[positions]
            if not np.any(D > 0):
                outputs.append(NoParams("degenerate normalization row"))
                continue
            outputs.append(CutGenParams(pi=pi, eta=eta, D_diag=D, p=sizes.p))
        return outputs

    mask = np.full(sizes.n, -np.inf)
    mask[fractional] = 0.0
    encodings = encode(history, _integer_mask(sizes.n, integer_indices),
                       sizes.rounds * sizes.heads, sizes.history)
    f2, _ = _trunk_forward(params, encodings)
    outputs = []
    for k in range(sizes.heads):
        if not fractional:
            outputs.append(NoParams())
            continue
        scores, block, _ = _head_blocks(params, f2, k, m_hat)
        j = int(np.argmax(scores + mask))
        pi = np.zeros(sizes.n)
        pi[j] = 1.0
        D = width * _softmax(block)
        outputs.append(CutGenParams(pi=pi, eta=float(np.floor(x_bar[j])),
                                    D_diag=D, p=sizes.p))
    return outputs


def _integer_mask(n: int, integer_indices) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[list(integer_indices)] = True
    return mask


def _table_row(sizes: PolicySizes, history) -> int:
    round_index = history[-1].round_index if len(history) else 0
    if round_index >= sizes.rounds:
        raise ValueError(f"round {round_index} exceeds the static table "
                         f"({sizes.rounds} rounds)")
    return round_index


def trainable_arrays(params: PolicyParams) -> dict[str, np.ndarray]:
    """Live references to everything the trainer updates."""
    return params.arrays


def policy_backward(params: PolicyParams, history, x_bar, integer_indices,
                    m_hat: int, cot_D) -> dict[str, np.ndarray]:
    """Gradients of sum_k cot_D[k] . D_k with respect to the trainable
    arrays; entries of cot_D may be None for heads that did not act. The
    disjunction path is piecewise constant and contributes nothing, and the
    chain is truncated at the state encoding.
    """
    sizes = params.sizes
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    if sizes.mode == "static":
        round_index = _table_row(sizes, history)
        positions = _norm_slice_positions(m_hat, sizes.m_hat_max)
        for k, cot in enumerate(cot_D):
            if cot is None:
                continue
            grads["D_table"][round_index, k, positions] += cot
        return grads

    width = 2 * (m_hat + 1)
    encodings = encode(history, _integer_mask(sizes.n, integer_indices),
                       sizes.rounds * sizes.heads, sizes.history)
    f2, (lstm_cache, h_last, f1, _) = _trunk_forward(params, encodings)
    a = params.arrays
    cot_f2 = np.zeros(sizes.fc2_out)
    for k, cot in enumerate(cot_D):
        if cot is None:
            continue
        _, block, positions = _head_blocks(params, f2, k, m_hat)
        s = _softmax(block)
        cot_block = width * s * (cot - float(cot @ s))
        cot_out = np.zeros(sizes.head_out)
        cot_out[positions] = cot_block
        grads["W_heads"][k] += np.outer(cot_out, f2)
        grads["b_heads"][k] += cot_out
        cot_f2 += a["W_heads"][k].T @ cot_out
    pre2 = cot_f2 * (1.0 - f2 ** 2)
    grads["W2"] += np.outer(pre2, f1)
    grads["b2"] += pre2
    cot_f1 = a["W2"].T @ pre2
    pre1 = cot_f1 * (1.0 - f1 ** 2)
    grads["W1"] += np.outer(pre1, h_last)
    grads["b1"] += pre1
    dh = a["W1"].T @ pre1

    H = sizes.hidden
    dc = np.zeros(H)
    for x, h_prev, c_prev, i, f, g, o, tc in reversed(lstm_cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                             dg * (1.0 - g ** 2), do * o * (1.0 - o)])
        grads["W_x"] += np.outer(da, x)
        grads["W_h"] += np.outer(da, h_prev)
        grads["b"] += da
        dh = a["W_h"].T @ da
        dc = dc * f
    return grads


def save_policy(params: PolicyParams, path) -> None:
    sizes = params.sizes
    payload = {
        "format": CKPT_FORMAT,
        "mode": sizes.mode,
        "config": {
            "n": sizes.n, "m": sizes.m, "rounds": sizes.rounds,
            "heads": sizes.heads, "hidden": sizes.hidden,
            "history": sizes.history,
            "p": "inf" if np.isinf(sizes.p) else sizes.p,
        },
        "arrays": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, arr in params.arrays.items()
        },
        "overrides": [
            {"round": r, "head": k, "pi": list(map(float, pi)),
             "eta": float(eta)}
            for (r, k), (pi, eta) in sorted(params.overrides.items())
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_policy(path) -> PolicyParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a {CKPT_FORMAT} checkpoint: "
                         f"{payload.get('format')!r}")
    cfg = payload["config"]
    p = np.inf if cfg["p"] == "inf" else float(cfg["p"])
    sizes = PolicySizes(n=cfg["n"], m=cfg["m"], rounds=cfg["rounds"],
                        heads=cfg["heads"], hidden=cfg["hidden"],
                        history=cfg["history"], p=p, mode=payload["mode"])
    arrays = {}
    for name, spec in payload["arrays"].items():
        data = np.frombuffer(base64.b64decode(spec["data"]), dtype="<f8")
        arrays[name] = data.reshape(spec["shape"]).copy()
    overrides = {
        (rec["round"], rec["head"]): (np.asarray(rec["pi"], dtype=float),
                                      float(rec["eta"]))
        for rec in payload.get("overrides", [])
    }
    return PolicyParams(sizes, arrays, overrides)
