"""Weight normalization: spectral-norm and stable-rank control of conv layers.

Two schemes share one structure (power iteration, division by the norm
estimate, re-weighting of a rank-one part against the residual):

* ``srn_normalize``  — operates on the [k*k*m_in, m_out] reshape of the kernel
  (the reshaped-matrix scheme; sets the *reshape* norm, which under-sets the
  norm of the actual conv operator);
* ``srnl_normalize`` — operates on the conv layer as an operator, running the
  power iteration with a convolution and its adjoint so the full operator
  matrix is never formed. With beta = 1 this is plain spectral normalization
  of the layer.

The stable-rank step here splits the normalized kernel into the span of the
rank-one gradient kernel S1 and its orthogonal complement, then shrinks the
complement so the layer Frobenius norm lands exactly on beta * m * n^2.
Note the gradient kernel S1 is generally not unit-norm (its entries sample a
correlation field of u against v), so the split uses the true projection
coefficient <K, S1>/||S1||^2; with ||S1|| = 1 this reduces to the familiar
S1 + gamma * (K - S1) update with gamma = sqrt(beta*m - 1/n^2)/||S2||_F.

u and v are constants during backward; the norm estimate u^T(K * v) and the
re-weighting stay differentiable in K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .spectral import PowerIterationState, power_iteration_layer
from .tensor import DEFAULT_PAD, Tensor, kernel_array

SCHEMES = ("none", "srn", "srnl")


class NormalizationError(ValueError):
    pass


@dataclass
class NormalizerConfig:
    """Target spectral norm alpha and stable-rank fraction beta for one scheme."""

    scheme: str = "none"
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = 1e-12
    power_iters_per_step: int = 1
    include_output: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise NormalizationError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if not self.alpha > 0:
            raise NormalizationError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.beta <= 1:
            raise NormalizationError(f"beta must be in (0, 1], got {self.beta}")
        if not self.epsilon > 0:
            raise NormalizationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.power_iters_per_step < 1:
            raise NormalizationError("power_iters_per_step must be >= 1")


@dataclass
class NormalizeInfo:
    """Diagnostics from one normalization pass."""

    sigma: float = 0.0
    gamma: float = math.inf
    coef: float = 0.0
    rank_one_norm_sq: float = 0.0
    stable_rank_applied: bool = False
    skipped: str = ""
    degenerate: bool = False
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None


def rank_one_kernel(u, v, k, pad=DEFAULT_PAD):
    """The unique kernel S1 with <S1, K'> = u^T (K' * v) for every kernel K'.

    Closed form: S1[a,b,c,o] = sum_ij u[i,j,o] * v[i+a-p, j+b-p, c], a spatial
    cross-correlation of u against v (independent of the tape implementation,
    which reaches the same object through the conv backward pass).
    """
    u = np.asarray(u)
    v = np.asarray(v)
    n = u.shape[0]
    p = (k - 1) // 2
    mode = "wrap" if pad == "circular" else "constant"
    vp = np.pad(v, ((p, p), (p, p), (0, 0)), mode=mode) if p else v
    S = np.zeros((k, k, v.shape[2], u.shape[2]), dtype=np.result_type(u, v))
    for a in range(k):
        for b in range(k):
            S[a, b] = np.einsum("ijc,ijo->co", vp[a:a + n, b:b + n], u)
    return S


def _stable_rank_step(k_norm, s1, beta, m_eff, n, info):
    """Shrink the orthogonal complement of S1 so ||W||_F^2 = beta * m * n^2."""
    s = float((s1.astype(np.float64) ** 2).sum())
    info.rank_one_norm_sq = s
    if beta * m_eff <= 1.0 / (n * n):
        raise NormalizationError(
            f"beta*m = {beta * m_eff:.4g} <= 1/n^2 = {1.0 / (n * n):.4g}: target stable "
            "rank below the rank-one floor"
        )
    if s == 0.0:
        info.skipped = "rank-one kernel vanished (degenerate u, v)"
        return k_norm
    s1_const = Tensor(s1.astype(np.float32))
    coef_t = T.scale(T.inner(k_norm, s1_const), 1.0 / s)
    c = float(coef_t.data)
    info.coef = c
    s2_t = k_norm - T.mul(coef_t, s1_const)
    s2_norm = float(np.linalg.norm(s2_t.data.astype(np.float64)))
    info.s2 = s2_t.data.copy()
    if s2_norm == 0.0:
        info.skipped = "residual S2 is zero: kernel already rank-one"
        return k_norm
    disc = beta * m_eff - c * c * s
    if disc <= 0.0:
        info.skipped = (
            f"target beta*m = {beta * m_eff:.4g} not above preserved component "
            f"{c * c * s:.4g}; shrinking S2 cannot reach it"
        )
        return k_norm
    gamma = math.sqrt(disc) / s2_norm
    info.gamma = gamma
    if gamma >= 1.0:
        return k_norm
    # traced gamma: sqrt(beta*m - coef^2 * s) / ||S2|| (relu guards float32 cancellation)
    disc_t = T.scale(T.mul(coef_t, coef_t), -s) + beta * m_eff
    gamma_t = T.div(T.sqrt(T.relu(disc_t)), T.l2_norm(s2_t))
    info.stable_rank_applied = True
    return T.mul(coef_t, s1_const) + T.mul(gamma_t, s2_t)


def srnl_normalize(kernel, n, config, state=None, pad=DEFAULT_PAD, seed=0):
    """Stable rank normalization of the layer (conv/adjoint power iteration).

    Returns (normalized kernel as a traced Tensor, state, info). The caller
    scales by alpha at the use site. One power-iteration update (or
    ``config.power_iters_per_step``) is performed on ``state`` per call, so a
    training loop warm-starts across steps; diagnostics converge the state
    first (see NormalizedLayer.freeze).
    """
    if config.scheme != "srnl":
        raise NormalizationError(f"srnl_normalize called with scheme {config.scheme!r}")
    k_t = kernel if isinstance(kernel, Tensor) else Tensor(kernel_array(kernel))
    K = k_t.data
    info = NormalizeInfo()
    sigma, state, v = power_iteration_layer(
        K, n, state, iters=config.power_iters_per_step, pad=pad, seed=seed
    )
    info.sigma = sigma
    if state.degenerate:
        info.degenerate = True
        info.skipped = "degenerate kernel: K * v vanished, sigma = 0"
    u_const = Tensor(state.u)
    v_const = Tensor(v.astype(np.float32))
    sigma_t = T.inner(u_const, T.conv2d(v_const, k_t, pad=pad))
    k_norm = T.div(k_t, sigma_t + config.epsilon)
    if config.beta < 1.0 and not state.degenerate:
        m_eff = min(K.shape[2], K.shape[3])
        s1 = rank_one_kernel(state.u, v, K.shape[0], pad=pad)
        info.s1 = s1
        k_norm = _stable_rank_step(k_norm, s1, config.beta, m_eff, n, info)
    return k_norm, state, info


def srn_normalize(kernel, config, state=None, seed=0):
    """Stable rank normalization on the [k*k*m_in, m_out] kernel reshape.

    Verbatim matrix algorithm: here the rank-one part u v^T has unit Frobenius
    norm by construction, so the projection step degenerates to the familiar
    form. Returns (normalized kernel Tensor, state u, info).
    """
    if config.scheme != "srn":
        raise NormalizationError(f"srn_normalize called with scheme {config.scheme!r}")
    k_t = kernel if isinstance(kernel, Tensor) else Tensor(kernel_array(kernel))
    K = k_t.data
    m_out = K.shape[3]
    R = K.reshape(-1, m_out)
    info = NormalizeInfo()
    if state is None:
        rng = np.random.default_rng(seed)
        state = rng.standard_normal(m_out).astype(np.float64)
        state /= np.linalg.norm(state)
    u = state
    v = np.zeros(R.shape[0])
    sigma = 0.0
    for _ in range(config.power_iters_per_step):
        vt = R.astype(np.float64) @ u
        nv = float(np.linalg.norm(vt))
        if nv == 0.0:
            info.degenerate = True
            break
        v = vt / nv
        ut = R.astype(np.float64).T @ v
        nu = float(np.linalg.norm(ut))
        if nu == 0.0:
            info.degenerate = True
            break
        u = ut / nu
        sigma = float(u @ (R.astype(np.float64).T @ v))
    info.sigma = sigma
    if info.degenerate:
        info.skipped = "degenerate kernel: reshape power iteration vanished"
    r_t = T.reshape(k_t, R.shape)
    vu = np.outer(v, u).astype(np.float32)
    sigma_t = T.inner(r_t, Tensor(vu))
    r_norm = T.div(r_t, sigma_t + config.epsilon)
    if config.beta < 1.0 and not info.degenerate:
        if config.beta * m_out <= 1.0:
            raise NormalizationError(
                f"beta*m = {config.beta * m_out:.4g} <= 1: reshape stable-rank target "
                "below the rank-one floor"
            )
        s1 = vu  # exactly unit Frobenius norm
        info.s1 = s1
        info.rank_one_norm_sq = 1.0
        s1_const = Tensor(s1)
        s2_t = r_norm - s1_const
        s2_norm = float(np.linalg.norm(s2_t.data.astype(np.float64)))
        info.s2 = s2_t.data.copy()
        info.coef = float(T.inner(r_norm, s1_const).data)
        if s2_norm == 0.0:
            info.skipped = "residual S2 is zero: reshape already rank-one"
        else:
            gamma = math.sqrt(config.beta * m_out - 1.0) / s2_norm
            info.gamma = gamma
            if gamma < 1.0:
                gamma_t = T.div(math.sqrt(config.beta * m_out - 1.0), T.l2_norm(s2_t))
                r_norm = s1_const + T.mul(gamma_t, s2_t)
                info.stable_rank_applied = True
    return T.reshape(r_norm, K.shape), u, info


def dampen_features(h, lam):
    """Scale recurrent features by lambda in [0, 1]."""
    if not 0.0 <= lam <= 1.0:
        raise NormalizationError(f"dampening lambda must be in [0, 1], got {lam}")
    if isinstance(h, Tensor):
        return T.scale(h, lam)
    return np.asarray(h) * np.float32(lam)


def dampen_kernel(kernel, lam):
    """Scale a recurrent-path kernel by lambda; (lam*K) * y == K * (lam*y)."""
    if not 0.0 <= lam <= 1.0:
        raise NormalizationError(f"dampening lambda must be in [0, 1], got {lam}")
    if isinstance(kernel, Tensor):
        return T.scale(kernel, lam)
    return kernel_array(kernel) * np.float32(lam)


class NormalizedLayer:
    """A conv layer whose forward always uses alpha * K_tilde, never raw K.

    Owns the raw kernel parameter, an optional per-channel bias (excluded
    from normalization: biases do not move the Lipschitz constant), and the
    power-iteration state that persists across training steps. During
    training the normalized kernel is recomputed every step; ``freeze``
    converges the power iteration and caches the result for inference.
    """

    def __init__(self, name, kernel, bias=None, config=None, norm_n=None, pad=DEFAULT_PAD, seed=0):
        self.name = name
        self.kernel = kernel if isinstance(kernel, Tensor) else Tensor(kernel, requires_grad=True)
        self.bias = bias
        self.config = config or NormalizerConfig()
        self.norm_n = norm_n
        self.pad = pad
        self.seed = seed
        self.pi_state = None
        self.frozen_kernel = None
        self.last_info = None

    @property
    def k(self):
        return self.kernel.data.shape[0]

    @property
    def m_in(self):
        return self.kernel.data.shape[2]

    @property
    def m_out(self):
        return self.kernel.data.shape[3]

    def parameters(self):
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]

    def effective_kernel(self, n=None):
        """Traced alpha * K_tilde for this step (or raw K when scheme is none)."""
        cfg = self.config
        if cfg.scheme == "none":
            return self.kernel
        n = n or self.norm_n
        if n is None:
            raise NormalizationError(f"layer {self.name}: normalization image size n not set")
        if cfg.scheme == "srnl":
            k_norm, self.pi_state, self.last_info = srnl_normalize(
                self.kernel, n, cfg, self.pi_state, pad=self.pad, seed=self.seed
            )
        else:
            k_norm, self.pi_state, self.last_info = srn_normalize(
                self.kernel, cfg, self.pi_state, seed=self.seed
            )
        return T.scale(k_norm, cfg.alpha)

    def converge_power_iteration(self, n=None, iters=400, tol=1e-9, max_iters=5000):
        """Cold-start-quality convergence of the warm state (diagnostics rule)."""
        cfg = self.config
        n = n or self.norm_n
        if cfg.scheme == "srnl":
            if self.pi_state is None:
                self.pi_state = PowerIterationState.cold(n, self.m_out, seed=self.seed)
            prev = None
            done = 0
            while done < max_iters:
                chunk = iters if done == 0 else 25
                sigma, self.pi_state, _ = power_iteration_layer(
                    self.kernel.data, n, self.pi_state, iters=chunk, pad=self.pad
                )
                done += chunk
                if self.pi_state.degenerate:
                    return
                if prev is not None and abs(sigma - prev) <= tol * max(abs(sigma), 1e-30):
                    return
                prev = sigma
        elif cfg.scheme == "srn":
            R = self.kernel.data.astype(np.float64).reshape(-1, self.m_out)
            if self.pi_state is None:
                rng = np.random.default_rng(self.seed)
                u = rng.standard_normal(self.m_out)
                u /= np.linalg.norm(u)
            else:
                u = self.pi_state
            prev = None
            for _ in range(max_iters):
                vt = R @ u
                nv = np.linalg.norm(vt)
                if nv == 0:
                    break
                v = vt / nv
                ut = R.T @ v
                nu = np.linalg.norm(ut)
                if nu == 0:
                    break
                u = ut / nu
                sigma = float(u @ (R.T @ v))
                if prev is not None and abs(sigma - prev) <= tol * max(abs(sigma), 1e-30):
                    break
                prev = sigma
            self.pi_state = u

    def freeze(self, n=None, iters=400, tol=1e-9):
        """Converge the power iteration and cache alpha * K_tilde for inference."""
        n = n or self.norm_n
        if self.config.scheme == "none":
            self.frozen_kernel = self.kernel.data.copy()
            return self.frozen_kernel
        self.converge_power_iteration(n, iters=iters, tol=tol)
        eff = self.effective_kernel(n)
        self.frozen_kernel = eff.data.copy()
        return self.frozen_kernel

    def unfreeze(self):
        self.frozen_kernel = None
