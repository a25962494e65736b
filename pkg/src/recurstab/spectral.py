"""Spectral norms, full spectra, stable ranks and Lipschitz bounds of conv layers.

Three independent routes to the singular values of the operator matrix W of a
convolution (circular padding makes W a block matrix of circulant blocks):

* ``power_iteration_layer`` — conv/adjoint power iteration, never materializes W;
* ``fft_exact_spectrum``    — 2-D DFT of the padded kernel followed by an SVD of
  the per-frequency transfer matrix, giving all n^2 * m singular values;
* ``materialize_operator``  — brute-force dense matrix, the verification oracle.

The FFT route and the materialization run in float64 so that algorithmic error
can be separated from float32 rounding in the training path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DEFAULT_PAD,
    conv2d_adjoint_raw,
    conv2d_raw,
    kernel_array,
)

MATERIALIZE_GUARDRAIL = 4096


class SpectralError(ValueError):
    pass


@dataclass
class LayerSpectrum:
    """Descending singular values of a conv layer plus derived quantities."""

    sigma: np.ndarray
    frobenius: float
    n: int
    source: str

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.ndim != 1:
            raise SpectralError("sigma must be a 1-D array of singular values")
        if (self.sigma < 0).any():
            raise SpectralError("singular values must be nonnegative")
        if (np.diff(self.sigma) > 1e-12 * max(1.0, self.sigma[0] if len(self.sigma) else 0.0)).any():
            raise SpectralError("sigma must be sorted descending")

    @property
    def sigma1(self):
        return float(self.sigma[0])


@dataclass
class PowerIterationState:
    """Warm-startable left vector for the conv/adjoint power iteration."""

    u: np.ndarray
    iterations: int = 0
    sigma: float = 0.0
    degenerate: bool = False

    @classmethod
    def cold(cls, n, m_out, seed=0):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n, n, m_out)).astype(np.float32)
        u /= np.linalg.norm(u)
        return cls(u=u)


def power_iteration_layer(kernel, n, state=None, iters=1, pad=DEFAULT_PAD, seed=0):
    """Alternate v = normalize(K^T * u), u = normalize(K * v) ``iters`` times.

    Returns (sigma1 estimate, state, v). The state's u persists so a training
    loop can run one iteration per step and stay converged as the kernel moves.
    A kernel with K*v identically zero yields sigma = 0 with the degenerate
    flag set instead of dividing by zero.
    """
    K = kernel_array(kernel)
    if state is None:
        state = PowerIterationState.cold(n, K.shape[3], seed=seed)
    if state.u.shape != (n, n, K.shape[3]):
        raise SpectralError(
            f"power-iteration state shape {state.u.shape} does not match [n,n,m_out]="
            f"{(n, n, K.shape[3])}"
        )
    u = state.u
    v = np.zeros((n, n, K.shape[2]), dtype=u.dtype)
    sigma = 0.0
    for _ in range(max(1, iters)):
        vt = conv2d_adjoint_raw(u, K, pad=pad)
        nv = float(np.linalg.norm(vt))
        if nv == 0.0:
            state.degenerate = True
            state.sigma = 0.0
            return 0.0, state, v
        v = vt / nv
        ut = conv2d_raw(v, K, pad=pad)
        nu = float(np.linalg.norm(ut))
        if nu == 0.0:
            state.degenerate = True
            state.sigma = 0.0
            return 0.0, state, v
        u = ut / nu
        sigma = float((u.astype(np.float64) * ut).sum())
        state.iterations += 1
    state.u = u.astype(np.float32)
    state.sigma = sigma
    state.degenerate = False
    return sigma, state, v


def estimate_layer_sigma1(kernel, n, pad=DEFAULT_PAD, iters=200, tol=1e-9, max_iters=5000, seed=0):
    """Cold-start power iteration with a relative-change stopping rule.

    Runs at least ``iters`` iterations and stops once the sigma estimate moves
    by less than ``tol`` relatively, which is the diagnostics-grade setting.
    """
    state = PowerIterationState.cold(n, kernel_array(kernel).shape[3], seed=seed)
    prev = None
    done = 0
    while done < max_iters:
        chunk = iters if done == 0 else 25
        sigma, state, _ = power_iteration_layer(kernel, n, state, iters=chunk, pad=pad)
        done += chunk
        if state.degenerate:
            return 0.0, state
        if prev is not None and abs(sigma - prev) <= tol * max(abs(sigma), 1e-30):
            break
        prev = sigma
    return sigma, state


def power_iteration_kernel2d(kernel, state=None, iters=1, seed=0):
    """Matrix power iteration on the [k*k*m_in, m_out] reshape of the kernel.

    This is the reshaped-kernel norm used by SRN; it underestimates the layer
    operator norm, which is exactly what the layer-level algorithm corrects.
    Returns (sigma1 estimate, u, v) with u in R^{m_out}, v in R^{k*k*m_in}.
    """
    K = kernel_array(kernel)
    R = K.reshape(-1, K.shape[3])
    if state is None:
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(R.shape[1])
        u /= np.linalg.norm(u)
    else:
        u = state
    v = np.zeros(R.shape[0])
    sigma = 0.0
    for _ in range(max(1, iters)):
        vt = R @ u
        nv = float(np.linalg.norm(vt))
        if nv == 0.0:
            return 0.0, u, v
        v = vt / nv
        ut = R.T @ v
        nu = float(np.linalg.norm(ut))
        if nu == 0.0:
            return 0.0, u, v
        u = ut / nu
        sigma = float(u @ (R.T @ v))
    return sigma, u, v


def fft_exact_spectrum(kernel, n):
    """All n^2 * min(m_in, m_out) singular values of the circular conv operator.

    Zero-pads the kernel to n x n per channel pair, takes the 2-D DFT and
    SVDs the m_out x m_in transfer matrix at each of the n^2 frequencies.
    Spatial placement of the kernel only contributes per-frequency phases,
    which do not move singular values. Runs in float64.
    """
    K = kernel_array(kernel).astype(np.float64)
    k = K.shape[0]
    if n < k:
        raise SpectralError(f"image size n={n} smaller than kernel size k={k}")
    padded = np.zeros((n, n, K.shape[2], K.shape[3]))
    padded[:k, :k] = K
    transfer = np.fft.fft2(padded, axes=(0, 1)).reshape(n * n, K.shape[2], K.shape[3])
    svs = np.linalg.svd(transfer, compute_uv=False).ravel()
    svs.sort()
    sigma = svs[::-1].copy()
    return LayerSpectrum(sigma=sigma, frobenius=float(np.sqrt((sigma ** 2).sum())),
                         n=n, source="fft_exact")


def materialize_operator(kernel, n, pad=DEFAULT_PAD, dtype=np.float32):
    """Dense [n^2*m_out, n^2*m_in] matrix of the conv; column j is conv2d(e_j).

    Shares the convolution core with conv2d bit for bit (at dtype float32);
    pass dtype=float64 for the high-precision oracle. Guardrailed to
    n^2 * max(m_in, m_out) <= 4096.
    """
    K = kernel_array(kernel).astype(dtype)
    m_in, m_out = K.shape[2], K.shape[3]
    if n * n * max(m_in, m_out) > MATERIALIZE_GUARDRAIL:
        raise SpectralError(
            f"materialization size n^2*m = {n * n * max(m_in, m_out)} exceeds guardrail "
            f"{MATERIALIZE_GUARDRAIL}"
        )
    W = np.zeros((n * n * m_out, n * n * m_in), dtype=dtype)
    basis = np.zeros((n, n, m_in), dtype=dtype)
    col = 0
    for i in range(n):
        for j in range(n):
            for c in range(m_in):
                basis[i, j, c] = 1.0
                W[:, col] = conv2d_raw(basis, K, pad=pad).reshape(-1)
                basis[i, j, c] = 0.0
                col += 1
    return W


def materialized_spectrum(kernel, n, pad=DEFAULT_PAD, dtype=np.float64):
    """LayerSpectrum from a dense SVD of the materialized operator (oracle)."""
    W = materialize_operator(kernel, n, pad=pad, dtype=dtype)
    sigma = np.linalg.svd(W, compute_uv=False)
    return LayerSpectrum(sigma=sigma, frobenius=float(np.linalg.norm(W)),
                         n=n, source="materialized")


def stable_rank(spectrum):
    """srank = ||W||_F^2 / sigma1^2, the area under the normalized spectrum."""
    if isinstance(spectrum, LayerSpectrum):
        s1, fro = spectrum.sigma1, spectrum.frobenius
    else:
        sigma = np.asarray(spectrum, dtype=np.float64)
        s1, fro = float(sigma.max(initial=0.0)), float(np.linalg.norm(sigma))
    if s1 <= 0.0:
        raise SpectralError("stable rank undefined for sigma1 = 0")
    return fro * fro / (s1 * s1)


def stable_rank_layer(kernel, n, sigma1):
    """Layer stable rank without materialization, using ||W||_F = n * ||K||_F."""
    if sigma1 <= 0.0:
        raise SpectralError("stable rank undefined for sigma1 = 0")
    K = kernel_array(kernel).astype(np.float64)
    fro = n * float(np.linalg.norm(K))
    return fro * fro / (sigma1 * sigma1)


@dataclass
class LipschitzBound:
    """Product-of-spectral-norms upper bound on the recurrence map."""

    bound: float
    per_layer: list = field(default_factory=list)
    residual_adjusted: bool = False
    note: str = ""


def _sigma1_auto(kernel, n, pad=DEFAULT_PAD):
    K = kernel_array(kernel)
    if n * n * max(K.shape[2], K.shape[3]) <= MATERIALIZE_GUARDRAIL and pad == "circular":
        return fft_exact_spectrum(K, n).sigma1
    sigma, _ = estimate_layer_sigma1(K, n, pad=pad)
    return sigma


def lipschitz_upper_bound(model, n=None, pad=DEFAULT_PAD):
    """Upper-bound the Lipschitz constant of the recurrence map in h.

    Multiplies sigma1 over the conv layers on the model's recurrent path
    (ReLU is 1-Lipschitz). Residual blocks on the path are each bounded by
    1 + sigma1(a) * sigma1(b); when that adjustment fires it is reported in
    the result, never silently applied.
    """
    n = n or model.norm_n
    path = model.recurrent_path()
    if not path:
        return LipschitzBound(bound=0.0, note="no recurrent path: output does not depend on h")
    bound = 1.0
    per_layer = []
    adjusted = False
    for element in path:
        if element[0] == "conv":
            _, name, K = element
            s = _sigma1_auto(K, n, pad=pad)
            per_layer.append((name, s))
            bound *= s
        elif element[0] == "residual":
            _, name, Ka, Kb = element
            sa = _sigma1_auto(Ka, n, pad=pad)
            sb = _sigma1_auto(Kb, n, pad=pad)
            term = 1.0 + sa * sb
            per_layer.append((name, term))
            bound *= term
            adjusted = True
        else:
            raise SpectralError(f"unknown recurrent-path element {element[0]!r}")
    note = "residual blocks bounded by 1 + sigma1(a)*sigma1(b)" if adjusted else ""
    return LipschitzBound(bound=bound, per_layer=per_layer, residual_adjusted=adjusted, note=note)
