"""Langevin sampling and gradient descent on the weight posterior.

The network is

    z^1 = W1 X / sqrt(N0),  z^l = W_l phi(z^{l-1}) / sqrt(N),  f = A^T phi(z^L) / N

(``1/sqrt(N)`` readout in the lazy scaling) and the potential is

    U = (N/T) * sum (y - f)^2 / 2 + sum_groups |theta|^2 / (2 sigma^2),

so ``exp(-U)`` is the posterior with the rescaled temperature ``T``.

Langevin steps may use a constant diagonal preconditioner with one scale
per parameter group (``theta <- theta - eps M grad U + sqrt(2 eps M) xi``),
which leaves the stationary distribution unchanged.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import erf_sigmoid, erf_sigmoid_prime, relu, relu_prime
from .tasks import Dataset

logger = logging.getLogger(__name__)

NONLINEARITIES = ("linear", "erf-sigmoid", "relu")
DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    """Raised when the training loss blows up during a run."""

    def __init__(self, message: str, step: int, loss: float):
        super().__init__(message)
        self.step = step
        self.loss = loss


def _phi(name):
    if name == "linear":
        return (lambda z: z), (lambda z: np.ones_like(z))
    if name == "erf-sigmoid":
        return erf_sigmoid, erf_sigmoid_prime
    if name == "relu":
        return relu, relu_prime
    raise ValueError(f"unknown nonlinearity {name!r}")


def default_sigma_a2(nonlinearity: str, P: int, L: int) -> float:
    """1/P for the erf sigmoid, P^(-1/L) otherwise."""
    return 1.0 / P if nonlinearity == "erf-sigmoid" else float(P) ** (-1.0 / L)


@dataclass
class NetworkArch:
    L: int
    N: int
    N0: int
    m: int
    nonlinearity: str = "linear"
    sigma_a2: float = 1.0
    sigma_l2: Optional[Sequence[float]] = None
    readout_scaling: str = "non-lazy"

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if min(self.L, self.N, self.N0, self.m) < 1:
            raise ValueError("L, N, N0 and m must be positive")
        if self.sigma_l2 is None:
            self.sigma_l2 = [1.0] * self.L
        self.sigma_l2 = [float(s) for s in self.sigma_l2]
        if len(self.sigma_l2) != self.L:
            raise ValueError("need one hidden prior variance per layer")
        if self.sigma_a2 < 0 or min(self.sigma_l2) < 0:
            raise ValueError("prior variances must be nonnegative")
        if self.readout_scaling not in ("non-lazy", "lazy"):
            raise ValueError(f"unknown readout scaling {self.readout_scaling!r}")

    @classmethod
    def for_dataset(cls, d: Dataset, L: int, N: int, nonlinearity: str, **kw) -> "NetworkArch":
        kw.setdefault("sigma_a2", default_sigma_a2(nonlinearity, d.P, L))
        return cls(L=L, N=N, N0=d.N0, m=d.m, nonlinearity=nonlinearity, **kw)

    @property
    def readout_norm(self) -> float:
        return float(self.N) if self.readout_scaling == "non-lazy" else float(np.sqrt(self.N))

    @property
    def group_names(self) -> list:
        return [f"W{l + 1}" for l in range(self.L)] + ["A"]

    def to_dict(self) -> dict:
        return {"L": self.L, "N": self.N, "N0": self.N0, "m": self.m,
                "nonlinearity": self.nonlinearity, "sigma_a2": self.sigma_a2,
                "sigma_l2": list(self.sigma_l2), "readout_scaling": self.readout_scaling}


@dataclass
class WeightState:
    Ws: list
    A: np.ndarray

    @property
    def groups(self) -> list:
        return list(self.Ws) + [self.A]

    def copy(self) -> "WeightState":
        return WeightState([W.copy() for W in self.Ws], self.A.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.groups])

    @classmethod
    def from_flat(cls, x: np.ndarray, like: "WeightState") -> "WeightState":
        out, i = [], 0
        for g in like.groups:
            out.append(x[i:i + g.size].reshape(g.shape))
            i += g.size
        return cls(out[:-1], out[-1])

    def check(self, arch: NetworkArch):
        shapes = [(arch.N, arch.N0)] + [(arch.N, arch.N)] * (arch.L - 1) + [(arch.N, arch.m)]
        for g, s in zip(self.groups, shapes):
            if g.shape != s:
                raise ValueError(f"weight shape {g.shape} does not match {s}")
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite weights")

    def permuted(self, perm: np.ndarray) -> "WeightState":
        """Relabel hidden units of every layer by the same permutation."""
        Ws = [self.Ws[0][perm]] + [W[perm][:, perm] for W in self.Ws[1:]]
        return WeightState(Ws, self.A[perm])


def init_from_prior(arch: NetworkArch, seed: int = 0) -> WeightState:
    rng = np.random.default_rng(seed)
    Ws = [np.sqrt(arch.sigma_l2[0]) * rng.standard_normal((arch.N, arch.N0))]
    for l in range(1, arch.L):
        Ws.append(np.sqrt(arch.sigma_l2[l]) * rng.standard_normal((arch.N, arch.N)))
    A = np.sqrt(arch.sigma_a2) * rng.standard_normal((arch.N, arch.m))
    return WeightState(Ws, A)


def activations(state: WeightState, arch: NetworkArch, X: np.ndarray) -> list:
    """Per-layer (preactivation, postactivation) pairs, each N x P_eval."""
    f, _ = _phi(arch.nonlinearity)
    X = np.asarray(X, dtype=float)
    out = []
    h = X
    for l, W in enumerate(state.Ws):
        z = W @ h / np.sqrt(h.shape[0])
        h = f(z)
        out.append((z, h))
    return out


def network_output(state: WeightState, arch: NetworkArch, X: np.ndarray) -> np.ndarray:
    """Network output f(x) for columns of X; shape (P_eval, m)."""
    h = activations(state, arch, X)[-1][1]
    return h.T @ state.A / arch.readout_norm


def loss(state: WeightState, d: Dataset, arch: NetworkArch) -> float:
    R = network_output(state, arch, d.X) - d.Y
    return 0.5 * float(np.sum(R * R))


def regularizer(state: WeightState, arch: NetworkArch) -> float:
    out = 0.0
    for g, s2 in zip(state.groups, list(arch.sigma_l2) + [arch.sigma_a2]):
        if s2 > 0:
            out += float(np.sum(g * g)) / (2 * s2)
    return out


def potential_and_gradient(state: WeightState, d: Dataset, arch: NetworkArch, T: float):
    """Potential U and its gradient (a WeightState).

    ``T = inf`` drops the likelihood and leaves the prior.  Groups with zero
    prior variance get zero gradient (they stay at zero).
    """
    U, grad, _, _ = _potential_parts(state, d, arch, T)
    return U, grad


def _potential_parts(state: WeightState, d: Dataset, arch: NetworkArch, T: float):
    """(U, gradient, data loss, regularizer) from one forward/backward pass."""
    f, fp = _phi(arch.nonlinearity)
    layers = activations(state, arch, d.X)
    hL = layers[-1][1]
    norm = arch.readout_norm
    out = hL.T @ state.A / norm
    R = out - d.Y
    data_loss = 0.5 * float(np.sum(R * R))
    reg = regularizer(state, arch)
    beta = 0.0 if np.isinf(T) else arch.N / T
    if beta:
        G = beta * R  # dU/df, P x m
        gA = hL @ G / norm
        dh = state.A @ G.T / norm  # N x P
        gWs = [None] * arch.L
        for l in range(arch.L - 1, -1, -1):
            z = layers[l][0]
            h_prev = d.X if l == 0 else layers[l - 1][1]
            scale = np.sqrt(h_prev.shape[0])
            dz = dh * fp(z)
            gWs[l] = dz @ h_prev.T / scale
            if l:
                dh = state.Ws[l].T @ dz / scale
    else:
        gA = np.zeros_like(state.A)
        gWs = [np.zeros_like(W) for W in state.Ws]
    for l, s2 in enumerate(arch.sigma_l2):
        gWs[l] = gWs[l] + state.Ws[l] / s2 if s2 > 0 else np.zeros_like(state.Ws[l])
    gA = gA + state.A / arch.sigma_a2 if arch.sigma_a2 > 0 else np.zeros_like(state.A)
    return beta * data_loss + reg, WeightState(gWs, gA), data_loss, reg


@dataclass
class SampleChain:
    states: list
    steps: list
    step_size: float
    T: float
    seed: int
    loss_trace: np.ndarray
    reg_trace: np.ndarray
    arch: NetworkArch
    precond: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    method: str = "langevin"

    @property
    def last(self) -> WeightState:
        return self.states[-1]

    def after(self, burn_in: int) -> list:
        """Checkpoints recorded at or after step ``burn_in``."""
        return [s for s, k in zip(self.states, self.steps) if k >= burn_in]

    def manifest(self) -> dict:
        return {"arch": self.arch.to_dict(), "seed": self.seed, "step_size": self.step_size,
                "T": self.T, "steps": list(map(int, self.steps)), "precond": self.precond,
                "method": self.method, "rng_state": self.rng_state,
                "total_steps": int(self.steps[-1]) if self.steps else 0}


def _group_curvature(state: WeightState, d: Dataset, arch: NetworkArch, T: float,
                     group: int, iters: int = 15, seed: int = 0) -> float:
    """Largest Hessian eigenvalue within one parameter group by power iteration."""
    rng = np.random.default_rng(seed)
    g0 = state.groups[group]
    v = rng.standard_normal(g0.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    eps = 1e-4 * max(1.0, float(np.sqrt(np.mean(g0 ** 2))))
    for _ in range(iters):
        plus, minus = state.copy(), state.copy()
        plus.groups[group][...] += eps * v
        minus.groups[group][...] -= eps * v
        Hv = (potential_and_gradient(plus, d, arch, T)[1].groups[group]
              - potential_and_gradient(minus, d, arch, T)[1].groups[group]) / (2 * eps)
        lam = float(np.sum(v * Hv))
        nrm = np.linalg.norm(Hv)
        if nrm == 0:
            break
        v = Hv / nrm
    return abs(lam)


def estimate_preconditioner(state: WeightState, d: Dataset, arch: NetworkArch, T: float,
                            safety: float = 0.1) -> tuple:
    """Per-group step multipliers and a matching base step.

    Returns ``(step, precond)`` with ``step * precond[g] = safety / lambda_g``
    where ``lambda_g`` is the top curvature of group ``g``; the stiffest group
    has multiplier 1.
    """
    lams = [max(_group_curvature(state, d, arch, T, g), 1e-12)
            for g in range(len(state.groups))]
    lmax = max(lams)
    return safety / lmax, {name: lmax / lam for name, lam in zip(arch.group_names, lams)}


def _precond_vector(arch: NetworkArch, precond: Optional[dict]) -> list:
    precond = precond or {}
    return [float(precond.get(name, 1.0)) for name in arch.group_names]


def _record(chain: SampleChain, state: WeightState, step: int):
    chain.states.append(state.copy())
    chain.steps.append(step)


def _check_divergence(L: float, step: int):
    if not np.isfinite(L) or L > DIVERGENCE_LOSS:
        raise DivergenceError(f"loss {L:.3e} exceeded {DIVERGENCE_LOSS:.0e} at step {step}; "
                              "reduce the step size", step, L)


def _span_basis(X: np.ndarray, rtol: float = 1e-10) -> tuple:
    """(basis, is_null): orthonormal basis of the column span of X or of its
    complement, whichever has fewer columns."""
    U, s, _ = np.linalg.svd(X, full_matrices=True)
    rank = int(np.sum(s > rtol * max(s.max(initial=0.0), 1e-300)))
    if rank <= X.shape[0] - rank:
        return U[:, :rank], False
    return U[:, rank:], True


def _redraw_null(W: np.ndarray, basis: tuple, sigma: float, rng):
    """Replace the block of W acting off the span of the training inputs by a prior draw."""
    B, is_null = basis
    if is_null:
        W -= (W @ B) @ B.T
        W += sigma * rng.standard_normal((W.shape[0], B.shape[1])) @ B.T
    else:
        xi = sigma * rng.standard_normal(W.shape)
        W[...] = (W @ B) @ B.T + xi - (xi @ B) @ B.T


def langevin_run(state: WeightState, d: Dataset, arch: NetworkArch, T: float = 1e-4,
                 step: float = 1e-5, steps: int = 1000, thin: int = 100, seed: int = 0,
                 precond: Optional[dict] = None, checkpoint_dir=None,
                 chain: Optional[SampleChain] = None, exact_null: bool = False) -> SampleChain:
    """Unadjusted Langevin dynamics on U.

    ``thin`` sets the checkpoint spacing; loss and regularizer are traced
    every step.  Passing ``chain`` continues it (same rng stream).  With
    ``checkpoint_dir`` every checkpoint is written to disk as it is taken.

    With ``exact_null`` the part of W1 acting on the orthogonal complement
    of the training inputs is redrawn from the prior after every step.  That
    block never enters the likelihood, so its conditional law is the prior
    and the redraw is an exact Gibbs update; it removes the slowest mode of
    the chain (prior relaxation at the stiff step size).
    """
    if T <= 0:
        raise ValueError("Langevin sampling needs T > 0")
    if step <= 0 or thin < 1 or steps < 0:
        raise ValueError("step must be positive, thin >= 1 and steps >= 0")
    state.check(arch)
    state = state.copy()
    rng = np.random.default_rng(seed)
    if chain is None:
        chain = SampleChain(states=[], steps=[], step_size=step, T=T, seed=seed,
                            loss_trace=np.empty(0), reg_trace=np.empty(0), arch=arch,
                            precond=dict(precond or {}),
                            method="langevin+null" if exact_null else "langevin")
        _record(chain, state, 0)
        if checkpoint_dir is not None:
            save_checkpoint(chain, checkpoint_dir, len(chain.states) - 1)
        start = 0
    else:
        if chain.rng_state is not None:
            rng.bit_generator.state = chain.rng_state
        start = chain.steps[-1]
        exact_null = chain.method == "langevin+null"
    basis = _span_basis(d.X) if exact_null else None
    M = _precond_vector(arch, chain.precond)
    eps = [step * mg for mg in M]
    noise = [np.sqrt(2 * e) for e in eps]
    losses = np.empty(steps)
    regs = np.empty(steps)
    _, grad = potential_and_gradient(state, d, arch, T)
    gmax = max(float(np.abs(g).max()) * e for g, e in zip(grad.groups, eps))
    if gmax > 1.0:
        warnings.warn(f"initial step * |grad| = {gmax:.2e}; the step may be too large",
                      RuntimeWarning)
    for k in range(steps):
        for g, dg, e, s in zip(state.groups, grad.groups, eps, noise):
            g -= e * dg
            g += s * rng.standard_normal(g.shape)
        if basis is not None:
            _redraw_null(state.Ws[0], basis, np.sqrt(arch.sigma_l2[0]), rng)
        _, grad, losses[k], regs[k] = _potential_parts(state, d, arch, T)
        _check_divergence(losses[k], start + k + 1)
        if (k + 1) % thin == 0:
            _record(chain, state, start + k + 1)
            if checkpoint_dir is not None:
                chain.rng_state = rng.bit_generator.state
                save_checkpoint(chain, checkpoint_dir, len(chain.states) - 1)
    chain.loss_trace = np.concatenate([chain.loss_trace, losses])
    chain.reg_trace = np.concatenate([chain.reg_trace, regs])
    chain.rng_state = rng.bit_generator.state
    if checkpoint_dir is not None:
        write_manifest(chain, checkpoint_dir)
    return chain


def gradient_descent_run(state: WeightState, d: Dataset, arch: NetworkArch, T: float = 1e-4,
                         step: float = 1e-5, steps: int = 1000, thin: int = 100,
                         precond: Optional[dict] = None, min_step: float = 1e-20) -> SampleChain:
    """Noiseless descent on U with step halving whenever U would increase."""
    state.check(arch)
    state = state.copy()
    chain = SampleChain(states=[], steps=[], step_size=step, T=T, seed=-1,
                        loss_trace=np.empty(0), reg_trace=np.empty(0), arch=arch,
                        precond=dict(precond or {}), method="gradient-descent")
    _record(chain, state, 0)
    M = _precond_vector(arch, precond)
    U, grad = potential_and_gradient(state, d, arch, T)
    losses, regs, pots = [], [], []
    eta = step
    for k in range(steps):
        while True:
            trial = WeightState.from_flat(state.flat(), state)
            for g, dg, mg in zip(trial.groups, grad.groups, M):
                g -= eta * mg * dg
            U_new, grad_new = potential_and_gradient(trial, d, arch, T)
            if np.isfinite(U_new) and U_new <= U:
                break
            eta *= 0.5
            if eta < min_step:
                break
        if eta < min_step:
            logger.info("gradient descent stalled at step %d", k)
            break
        state, U, grad = trial, U_new, grad_new
        eta = min(eta * 1.1, step)
        losses.append(loss(state, d, arch))
        regs.append(regularizer(state, arch))
        pots.append(U)
        _check_divergence(losses[-1], k + 1)
        if (k + 1) % thin == 0:
            _record(chain, state, k + 1)
    if chain.steps[-1] != len(losses):
        _record(chain, state, len(losses))
    chain.loss_trace = np.array(losses)
    chain.reg_trace = np.array(regs)
    chain.potential_trace = np.array(pots)
    return chain


def detect_burn_in(trace: np.ndarray, window: int = 1000, tol: float = 1e-8) -> int:
    """First step after which the windowed loss mean has plateaued.

    A plateau is reached when consecutive window means differ by less than
    ``tol`` or by less than three standard errors of the window mean, so
    stochastic traces settle as well.  Returns ``len(trace)`` if never.
    """
    trace = np.asarray(trace, dtype=float)
    n = len(trace) // window
    if n < 2:
        return len(trace)
    blocks = trace[:n * window].reshape(n, window)
    means = blocks.mean(axis=1)
    sem = blocks.std(axis=1) / np.sqrt(window)
    for i in range(1, n):
        if abs(means[i] - means[i - 1]) < max(tol, 3 * np.hypot(sem[i], sem[i - 1])):
            return i * window
    return len(trace)


def annealed_burn_in(state: WeightState, d: Dataset, arch: NetworkArch, T: float = 1e-4,
                     T_start: float = 0.1, stages: int = 13, steps: int = 8000,
                     safety: float = 0.3, seed: int = 0, retries: int = 6):
    """Geometric temperature ladder from ``T_start`` down to ``T``.

    Neurons pick their codes while the posterior is still connected at high
    temperature, so branch populations are not frozen by the initial
    condition.  The preconditioner is re-estimated at every rung; a rung that
    diverges is restarted from its initial state with half the safety factor.
    Returns the final state and the preconditioner at ``T`` as
    (state, step, precond).
    """
    if T <= 0 or T_start < T:
        raise ValueError("need 0 < T <= T_start")
    for k, Tk in enumerate(np.geomspace(T_start, T, max(int(stages), 1))):
        s = safety
        for attempt in range(retries + 1):
            step, M = estimate_preconditioner(state, d, arch, Tk, safety=s)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    ch = langevin_run(state, d, arch, T=Tk, step=step, steps=steps,
                                      thin=max(steps, 1), seed=seed + k, precond=M)
                break
            except DivergenceError:
                if attempt == retries:
                    raise
                s *= 0.5
        state = ch.last
    step, M = estimate_preconditioner(state, d, arch, T, safety=safety)
    return state, step, M


# --- persistence ------------------------------------------------------------------

def _state_path(directory: Path, index: int) -> Path:
    return directory / f"state_{index:06d}.npz"


def save_checkpoint(chain: SampleChain, directory, index: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    st = chain.states[index]
    arrays = {f"W{l + 1}": W for l, W in enumerate(st.Ws)}
    arrays["A"] = st.A
    tmp = directory / f".tmp_{index:06d}.npz"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, _state_path(directory, index))
    write_manifest(chain, directory)


def write_manifest(chain: SampleChain, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "traces.npz", loss=chain.loss_trace, reg=chain.reg_trace)
    man = chain.manifest()
    man["files"] = [_state_path(directory, i).name for i in range(len(chain.states))]
    tmp = directory / ".manifest.json"
    tmp.write_text(json.dumps(man, indent=1, default=_json_default))
    os.replace(tmp, directory / "manifest.json")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def save_chain(chain: SampleChain, directory):
    for i in range(len(chain.states)):
        save_checkpoint(chain, directory, i)
    write_manifest(chain, directory)


def load_chain(directory) -> SampleChain:
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    arch = NetworkArch(**man["arch"])
    states = []
    for name in man["files"]:
        with np.load(directory / name) as z:
            Ws = [z[f"W{l + 1}"] for l in range(arch.L)]
            states.append(WeightState(Ws, z["A"]))
    steps = man["steps"][:len(states)]
    tr = directory / "traces.npz"
    loss_tr = reg_tr = np.empty(0)
    if tr.exists():
        with np.load(tr) as z:
            loss_tr, reg_tr = z["loss"], z["reg"]
    return SampleChain(states=states, steps=steps, step_size=man["step_size"], T=man["T"],
                       seed=man["seed"], loss_trace=loss_tr, reg_trace=reg_tr, arch=arch,
                       precond=man.get("precond") or {}, rng_state=man.get("rng_state"),
                       method=man.get("method", "langevin"))


def resume(directory, d: Dataset, steps: int, thin: Optional[int] = None) -> SampleChain:
    """Continue a persisted Langevin chain for ``steps`` more steps."""
    chain = load_chain(directory)
    if thin is None:
        thin = chain.steps[1] - chain.steps[0] if len(chain.steps) > 1 else max(steps, 1)
    return langevin_run(chain.last, d, chain.arch, T=chain.T, step=chain.step_size,
                        steps=steps, thin=thin, seed=chain.seed, checkpoint_dir=directory,
                        chain=chain)
