"""Benchmark data generators.

Every generator is a pure function of its arguments and seed. Returned
datasets use zero-based input channels ``x1..xn`` and a single output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal
from scipy.ndimage import uniform_filter1d

from .expr import Dataset
from .sdomain import TransferFunction, simulate_tf

__all__ = [
    "EWMA_COEFFS", "HYBRID_KINDS", "HYBRID_TRUTH", "HYBRID_COUNTS", "SWITCHED_THETA",
    "LFC_BLOCKS", "AVR_BLOCKS", "LFC_PID", "AVR_PID", "PD_TF", "PID_TF",
    "AttackSpec", "HybridData", "LFCRun", "gen_ewma", "gen_hybrid", "gen_switched_linear",
    "block_dataset", "simulate_avr", "simulate_lfc", "load_profile", "apply_injection",
    "tamper_gains", "gen_actuator", "add_noise", "UnstableLoop",
]

EWMA_COEFFS = (0.8, 0.16, 0.032)

HYBRID_KINDS = ("hysteresis-relay", "continuous-hysteresis", "phototaxic-robot", "nonlinear-system")
HYBRID_TRUTH = {
    "hysteresis-relay": ("1", "-1"),
    "continuous-hysteresis": ("0.5*x1^2 + x1 - 0.5", "-0.5*x1^2 + x1 + 0.5"),
    "phototaxic-robot": ("x2 - x1", "1/(x1 - x2)", "0"),
    "nonlinear-system": ("x1*x2", "6*x1/(6 + x2)", "(x1 + x2)/(x1 - x2)"),
}
HYBRID_COUNTS = {
    "hysteresis-relay": (1200, 1200),
    "continuous-hysteresis": (2000, 2000),
    "phototaxic-robot": (840, 1500, 1200),
    "nonlinear-system": (1500, 1000, 1000),
}

SWITCHED_THETA = (
    (-0.277, -1.779, 1.154),
    (-0.747, -1.816, 0.707),
    (-0.376, 1.803, 0.928),
)

LFC_BLOCKS = {
    "governor": TransferFunction((1.0,), (1.0, 0.2)),
    "turbine": TransferFunction((1.0,), (1.0, 0.5)),
    "inertia": TransferFunction((1.0,), (0.8, 10.0)),
}
LFC_PID = TransferFunction((3000.0, 5030.0, 1050.0), (0.0, 100.0, 1.0))
AVR_BLOCKS = {
    "amplifier": TransferFunction((10.0,), (1.0, 0.1)),
    "exciter": TransferFunction((1.0,), (1.0, 0.4)),
    "generator": TransferFunction((1.0,), (1.0, 1.0)),
    "sensor": TransferFunction((1.0,), (1.0, 0.05)),
}
AVR_PID = TransferFunction((100.0, 161.0, 81.6), (0.0, 100.0, 1.0))

# integral-separated controller of the LFC attack scenario
KP, KI, KD = 2.1, 0.6, 1.2
PD_TF = TransferFunction((KP, KP + KD), (1.0, 1.0))
PID_TF = TransferFunction((KI, KP + KI, KP + KD), (0.0, 1.0, 1.0))


class UnstableLoop(FloatingPointError):
    pass


def add_noise(y: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise with standard deviation ``level * std(y)``."""
    if level <= 0:
        return np.array(y, dtype=float)
    return y + rng.normal(0.0, level * np.std(y), size=y.shape)


def _ou(n: int, rng, theta=0.05, sigma=0.1, x0=0.0):
    """Ornstein-Uhlenbeck random walk sampled at unit steps."""
    x = np.empty(n)
    x[0] = x0
    e = rng.normal(size=n)
    for t in range(1, n):
        x[t] = x[t - 1] - theta * x[t - 1] + sigma * e[t]
    return x


def _rescale(x, lo, hi):
    a, b = x.min(), x.max()
    if b - a < 1e-12:
        return np.full_like(x, 0.5 * (lo + hi))
    return lo + (x - a) * (hi - lo) / (b - a)


# --- EWMA ---------------------------------------------------------------------

def gen_ewma(T: int = 500, alpha: float = 0.8, contamination: float = 0.0, seed=0,
             mean: float = 20.0, ar: float = 0.5, scale: float = 1.0, eps_mean: float = -0.1,
             eps_std: float = 0.1, window: int = 25, x=None):
    """Truncated EWMA ``y = a x(t) + a(1-a) x(t-1) + a(1-a)^2 x(t-2)``.

    The clean input is an AR(1) signal around ``mean`` unless ``x`` is given.
    A ``contamination`` fraction of observed inputs is shifted by
    ``xbar * eps`` where ``xbar`` is a centred rolling mean of the clean input
    and ``eps ~ N(eps_mean, eps_std)``. Outputs are computed from the clean
    input, so the perturbed samples act as outliers.

    Returns ``(dataset, outlier_mask, clean_dataset)``.
    """
    if T < 3:
        raise ValueError("T must be at least 3")
    rng = np.random.default_rng(seed)
    if x is None:
        e = rng.normal(0.0, scale * np.sqrt(1 - ar * ar), size=T)
        x = np.empty(T)
        x[0] = e[0] / np.sqrt(1 - ar * ar)
        for t in range(1, T):
            x[t] = ar * x[t - 1] + e[t]
        x = x + mean
    else:
        x = np.asarray(x, dtype=float)
        T = x.size
    c = (alpha, alpha * (1 - alpha), alpha * (1 - alpha) ** 2)
    y = c[0] * x
    y[1:] += c[1] * x[:-1]
    y[2:] += c[2] * x[:-2]
    mask = np.zeros(T, dtype=bool)
    n_out = int(round(contamination * T))
    xo = x.copy()
    if n_out:
        idx = rng.choice(T, size=n_out, replace=False)
        mask[idx] = True
        xbar = uniform_filter1d(x, size=window, mode="nearest")
        xo[idx] = x[idx] + xbar[idx] * rng.normal(eps_mean, eps_std, size=n_out)
    return Dataset(xo, y, max_delay=2), mask, Dataset(x, y, max_delay=2)


# --- hybrid systems -----------------------------------------------------------

@dataclass
class HybridData:
    kind: str
    train: Dataset           # noisy outputs
    test: Dataset            # noiseless copy
    labels: np.ndarray       # true mode index per timestep
    truth: tuple             # mode equations as text


def _schedule(counts, n_segments, rng, order=None):
    """Cycle through modes; mode k's count is split into ``n_segments`` runs."""
    K = len(counts)
    lengths = []
    for c in counts:
        base = np.full(n_segments, c // n_segments)
        base[: c - base.sum()] += 1
        lengths.append(list(base))
    labels = []
    for s in range(n_segments):
        seq = range(K) if order is None else order
        for k in seq:
            labels.extend([k] * lengths[k][s])
    return np.array(labels)


def gen_hybrid(kind: str, noise: float = 0.0, seed=0, counts=None) -> HybridData:
    """One of the four benchmark hybrid systems with true mode labels."""
    if kind not in HYBRID_KINDS:
        raise ValueError(f"unknown hybrid system {kind!r}")
    rng = np.random.default_rng(seed)
    counts = tuple(counts or HYBRID_COUNTS[kind])
    if kind == "hysteresis-relay":
        n = counts[0] // 200
        P = 400
        T = 2 * n * 200
        t = np.arange(T)
        # phase chosen so that switches (x crossing +-0.5) land on multiples of P/2;
        # the quarter-sample shift keeps samples off the thresholds themselves
        x = np.sin(2 * np.pi * (t + 0.25) / P - np.pi + np.pi / 6)
        lab = np.empty(T, dtype=int)
        state = 1  # mode index 1 is y=-1
        for i in range(T):
            if x[i] > 0.5:
                state = 0
            elif x[i] < -0.5:
                state = 1
            lab[i] = state
        y = np.where(lab == 0, 1.0, -1.0)
        X = x[:, None]
    elif kind == "continuous-hysteresis":
        P = 100
        T = sum(counts)
        t = np.arange(T)
        # triangle sweep: rising half in mode 0, falling half in mode 1
        ph = (t % P + 0.5) / (P // 2)
        lab = (ph >= 1).astype(int)
        x = np.where(lab == 0, -1 + 2 * ph, 3 - 2 * ph)
        y = np.where(lab == 0, 0.5 * x ** 2 + x - 0.5, -0.5 * x ** 2 + x + 0.5)
        X = x[:, None]
    elif kind == "phototaxic-robot":
        lab = _schedule(counts, 4, rng)
        T = lab.size
        x2 = _rescale(_ou(T, rng), 0.0, 3.0)
        gap = _rescale(_ou(T, rng), 0.5, 2.0)
        x1 = _rescale(_ou(T, rng), 0.0, 3.0)
        x1 = np.where(lab == 1, x2 + gap, x1)
        y = np.select([lab == 0, lab == 1], [x2 - x1, 1.0 / (x1 - x2)], 0.0)
        X = np.column_stack([x1, x2])
    else:
        lab = _schedule(counts, 5, rng)
        T = lab.size
        x1 = _rescale(_ou(T, rng), 1.5, 3.0)
        x2 = _rescale(_ou(T, rng), 0.0, 1.0)
        y = np.select([lab == 0, lab == 1],
                      [x1 * x2, 6 * x1 / (6 + x2)], (x1 + x2) / (x1 - x2))
        X = np.column_stack([x1, x2])
    yn = add_noise(y, noise, rng)
    return HybridData(kind, Dataset(X, yn), Dataset(X, y), lab, HYBRID_TRUTH[kind])


def gen_switched_linear(snr_db: float = 40.0, seed=0, per_mode: int = 1200, n_segments: int = 6,
                        theta=SWITCHED_THETA):
    """ARX submodels ``y(t) = th_k . [y(t-1), x(t-1), x(t-2)] + e(t)``.

    ``e`` is white Gaussian noise scaled so that the noise-free output power
    over the noise power equals ``snr_db``. Returns ``(dataset, labels, e)``;
    the dataset inputs are ``[x, y(t-1)]`` so delayed variables reach both.
    """
    rng = np.random.default_rng(seed)
    lab = _schedule([per_mode] * len(theta), n_segments, rng)
    T = lab.size
    x = rng.normal(size=T)
    th = np.asarray(theta)

    def run(e):
        y = np.zeros(T)
        for t in range(2, T):
            y[t] = th[lab[t]] @ (y[t - 1], x[t - 1], x[t - 2]) + e[t]
        return y

    y0 = run(np.zeros(T))
    e = rng.normal(size=T)
    e[:2] = 0.0
    if np.isfinite(snr_db):
        p_sig = np.mean(y0 ** 2)
        e *= np.sqrt(p_sig / 10 ** (snr_db / 10) / np.mean(e ** 2))
    else:
        e[:] = 0.0
    y = run(e)
    yprev = np.concatenate([[0.0], y[:-1]])
    return Dataset(np.column_stack([x, yprev]), y, max_delay=2), lab, e


# --- transfer-function blocks -------------------------------------------------

def block_dataset(tf: TransferFunction, duration: float = 10.0, dt: float = 1e-3, seed=0,
                  noise_std: float = 0.2, cutoff_hz: float = 2.0, method: str = "euler") -> Dataset:
    """Open-loop excitation of one block: unit step plus band-limited noise."""
    rng = np.random.default_rng(seed)
    T = int(round(duration / dt))
    b, a = signal.butter(2, 2 * cutoff_hz * dt)
    n = signal.lfilter(b, a, rng.normal(size=T))
    n *= noise_std / max(np.std(n), 1e-12)
    u = 1.0 + n
    y = simulate_tf(tf, u, dt, method)
    return Dataset(u, y, dt=dt, names=("u",))


def simulate_avr(duration: float = 10.0, dt: float = 1e-3, v_ref: float = 1.0, seed=0,
                 block_duration: float = 10.0):
    """Closed AVR loop with PID plus open-loop identification data per block.

    Returns ``(trace, blocks)``: ``trace`` holds the closed-loop signals,
    ``blocks`` maps block name to its Dataset.
    """
    from .sdomain import tf_to_statespace
    chain = [AVR_PID, AVR_BLOCKS["amplifier"], AVR_BLOCKS["exciter"], AVR_BLOCKS["generator"]]
    sens = tf_to_statespace(AVR_BLOCKS["sensor"])
    ss = [tf_to_statespace(t) for t in chain]
    xs = [np.zeros(s.order) for s in ss]
    xsen = np.zeros(sens.order)
    T = int(round(duration / dt))
    out = {k: np.zeros(T) for k in ("t", "error", "pid", "amplifier", "exciter", "vt", "vs")}
    for t in range(T):
        vs = float(sens.C[0] @ xsen)
        e = v_ref - vs
        sig = e
        vals = []
        for s, x in zip(ss, xs):
            o = float(s.C[0] @ x) + s.D * sig
            vals.append((sig, o))
            sig = o
        vt = sig
        if not np.isfinite(vt) or abs(vt) > 1e12:
            raise UnstableLoop("AVR loop diverged")
        for i, (s, x) in enumerate(zip(ss, xs)):
            xs[i] = x + dt * (s.A @ x + s.B[:, 0] * vals[i][0])
        xsen = xsen + dt * (sens.A @ xsen + sens.B[:, 0] * vt)
        out["t"][t] = t * dt
        out["error"][t] = e
        out["pid"][t] = vals[0][1]
        out["amplifier"][t] = vals[1][1]
        out["exciter"][t] = vals[2][1]
        out["vt"][t] = vt
        out["vs"][t] = vs
    blocks = {n: block_dataset(tf, block_duration, dt, seed + i)
              for i, (n, tf) in enumerate(list(AVR_BLOCKS.items()) + [("pid", AVR_PID)])}
    return out, blocks


# --- LFC loop with integral-separated controller --------------------------------

@dataclass(frozen=True)
class AttackSpec:
    """Controller attack applied in the window ``[t_off, period)`` of every period.

    ``kind`` is ``output-injection``, ``config-tampering`` or ``disabling``.
    For injection, each period's window is attacked with probability ``beta``
    (the Bernoulli expectation).
    """

    kind: str
    G: float = 2.0
    beta: float = 0.3
    period: int = 1000
    t_off: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("output-injection", "config-tampering", "disabling"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.beta <= 0.3:
            raise ValueError("beta expectation must lie in [0, 0.3]")
        if not 0 <= self.t_off <= self.period:
            raise ValueError("t_off must lie in [0, period]")

    def to_dict(self):
        return asdict(self)


def apply_injection(y, beta_mask, G: float = 2.0):
    """``beta * (-tanh(G y)) + (1 - beta) * y`` elementwise."""
    y = np.asarray(y, dtype=float)
    b = np.asarray(beta_mask, dtype=float)
    return b * (-np.tanh(G * y)) + (1 - b) * y


def tamper_gains(gains, rng) -> tuple:
    """Add standard-normal draws to (KP, KI, KD) and clip at zero."""
    g = np.asarray(gains, dtype=float) + rng.normal(size=3)
    return tuple(np.maximum(g, 0.0))


def load_profile(T: int, dt: float, seed=0, levels=(0.0, 0.3), dwell: float = 5.0,
                 alternate: bool = True, quiet: float = 0.0) -> np.ndarray:
    """Piecewise-constant load steps with dwell ``>= dwell`` seconds.

    With ``alternate`` the levels alternate between the lower and upper
    halves of the range so that every step is large.
    """
    rng = np.random.default_rng(seed)
    lo, hi = levels
    mid = 0.5 * (lo + hi)
    out = np.zeros(T)
    n_quiet = int(round(quiet / dt))
    t = n_quiet
    out[:n_quiet] = lo
    high = True
    while t < T:
        n = int(round(rng.uniform(dwell, 2 * dwell) / dt))
        if alternate:
            v = rng.uniform(mid + 0.5 * (hi - mid), hi) if high else rng.uniform(lo, lo + 0.5 * (mid - lo))
            high = not high
        else:
            v = rng.uniform(lo, hi)
        out[t: t + n] = v
        t += n
    return out


@dataclass
class LFCRun:
    data: Dataset              # controller input e -> emitted controller output
    labels: np.ndarray         # attacked timesteps
    mode: np.ndarray           # 0 = PD (|e| > threshold), 1 = PID
    legit: np.ndarray          # legitimate controller output on the same inputs
    traces: dict = field(default_factory=dict)


def simulate_lfc(duration: float = 180.0, dt: float = 0.01, attack: AttackSpec | None = None,
                 seed=0, load=None, error_gain: float = 15.0, threshold: float = 0.1,
                 gains=(KP, KI, KD), controller: str = "integral-separated",
                 levels=(0.0, 0.3), dwell: float = 5.0) -> LFCRun:
    """Load-frequency loop: governor, turbine, inertia, droop and a controller.

    The controller sees ``e = -error_gain * dw`` and is integral-separated:
    the integral term is dropped (PD mode) while ``|e| > threshold``. Its
    states are a first-order derivative filter ``z' = -z + e`` and a running
    integral ``I' = e``, so the PD and PID outputs equal the companion-form
    Euler simulations of ``PD_TF`` and ``PID_TF`` on the same input.
    ``controller='none'`` leaves only the droop.
    """
    T = int(round(duration / dt))
    rng = np.random.default_rng(seed)
    if load is None:
        load = load_profile(T, dt, seed, levels, dwell)
    load = np.asarray(load, dtype=float)
    if load.size != T:
        load = np.resize(load, T)
    arng = np.random.default_rng(attack.seed if attack else 0)
    kp0, ki0, kd0 = gains
    w = pm = pv = 0.0
    z = integ = 0.0
    e_arr = np.zeros(T)
    u_arr = np.zeros(T)
    legit = np.zeros(T)
    w_arr = np.zeros(T)
    pm_arr = np.zeros(T)
    lab = np.zeros(T, dtype=bool)
    mode = np.zeros(T, dtype=int)
    active_gains = (kp0, ki0, kd0)
    inj = False
    for t in range(T):
        e = -error_gain * w
        in_window = attack is not None and (t % attack.period) >= attack.t_off
        if attack is not None and t % attack.period == attack.t_off:
            if attack.kind == "config-tampering":
                active_gains = tamper_gains((kp0, ki0, kd0), arng)
            elif attack.kind == "output-injection":
                inj = arng.random() < attack.beta
        pid_on = abs(e) <= threshold
        mode[t] = int(pid_on)
        if controller == "none":
            u_ok = 0.0
        else:
            u_ok = (kp0 + kd0) * e - kd0 * z + (ki0 * integ if pid_on else 0.0)
        u = u_ok
        if in_window and controller != "none":
            if attack.kind == "config-tampering":
                kp, ki, kd = active_gains
                u = (kp + kd) * e - kd * z + (ki * integ if pid_on else 0.0)
            elif attack.kind == "disabling":
                u = 0.0
            elif inj:
                u = float(apply_injection(u_ok, 1.0, attack.G))
        lab[t] = u != u_ok
        e_arr[t], u_arr[t], legit[t], w_arr[t], pm_arr[t] = e, u, u_ok, w, pm
        pg = -20.0 * w + u
        w, pm, pv = (w + dt * (pm - load[t] - 0.8 * w) / 10.0,
                     pm + dt * (pv - pm) / 0.5,
                     pv + dt * (pg - pv) / 0.2)
        z, integ = z + dt * (e - z), integ + dt * e
        if not np.isfinite(w) or abs(w) > 1e12:
            raise UnstableLoop("LFC loop diverged")
    del rng
    traces = {"t": np.arange(T) * dt, "dw": w_arr, "pm": pm_arr, "load": load}
    return LFCRun(Dataset(e_arr, u_arr, dt=dt, names=("e",)), lab, mode, legit, traces)


# --- binary actuator ----------------------------------------------------------

def gen_actuator(T: int = 3000, seed=0, attack: str | None = None, attack_span=(0.4, 0.5)):
    """Tank-style plant with a binary actuator ``y = step(x1 - 2 x2)``.

    ``x1`` and ``x2`` feed the actuator rule; ``x3`` is a level sensor that
    plays no part in it. ``attack`` tampers one signal over the fraction
    ``attack_span`` of the trace:

    * ``actuator``: the actuator is forced off;
    * ``dependent-sensor``: ``x2`` is overwritten (the actuator keeps
      following the true value);
    * ``independent-sensor``: ``x3`` is pushed above its normal range.

    Returns ``(dataset, labels)`` with inputs ``[x1, x2, x3]``.
    """
    rng = np.random.default_rng(seed)
    x1 = _rescale(_ou(T, rng, 0.02, 0.1), 0.0, 4.0)
    x2 = _rescale(_ou(T, rng, 0.02, 0.1), 0.0, 2.0)
    x3 = _rescale(_ou(T, rng, 0.02, 0.1), 780.0, 1020.0)
    y = (x1 - 2 * x2 >= 0).astype(float)
    lab = np.zeros(T, dtype=bool)
    if attack is not None:
        a, b = int(attack_span[0] * T), int(attack_span[1] * T)
        if attack == "actuator":
            y = y.copy()
            y[a:b] = 0.0
            lab[a:b] = True
        elif attack == "dependent-sensor":
            x2 = x2.copy()
            x2[a:b] = 2.0 - x2[a:b]
            lab[a:b] = True
        elif attack == "independent-sensor":
            x3 = x3.copy()
            x3[a:b] = x3[a:b] + 150.0
            lab[a:b] = True
        else:
            raise ValueError(f"unknown attack {attack!r}")
    return Dataset(np.column_stack([x1, x2, x3]), y), lab
