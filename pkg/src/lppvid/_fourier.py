"""Trigonometric interpolation of uniformly sampled periodic data."""

import numpy as np


class PeriodicInterpolant:
    """Band-limited interpolant through samples on a uniform periodic grid.

    Parameters
    ----------
    values : ndarray, shape (M, ...)
        Samples at ``tau_m = m * period / M``. Trailing axes are channels.
    period : float
        Period of the underlying function.
    rtol : float
        Harmonics whose amplitude is below ``rtol`` times the largest
        amplitude are discarded to speed up evaluation.
    """

    def __init__(self, values, period, rtol=1e-12):
        values = np.asarray(values, dtype=float)
        self.period = float(period)
        self.channel_shape = values.shape[1:]
        M = values.shape[0]
        flat = values.reshape(M, -1)
        c = np.fft.rfft(flat, axis=0) / M
        cos_coef = 2.0 * c.real
        sin_coef = -2.0 * c.imag
        cos_coef[0] = c[0].real
        sin_coef[0] = 0.0
        if M % 2 == 0:
            # Nyquist term kept as a pure cosine so node values stay real.
            cos_coef[-1] = c[-1].real
            sin_coef[-1] = 0.0
        amp = np.abs(cos_coef) + np.abs(sin_coef)
        amp_ch = amp.max(axis=1)
        keep = amp_ch > rtol * max(amp_ch.max(), np.finfo(float).tiny)
        keep[0] = True
        kmax = int(np.nonzero(keep)[0].max())
        self.harmonics = np.arange(kmax + 1, dtype=float)
        self._cos = cos_coef[: kmax + 1]
        self._sin = sin_coef[: kmax + 1]
        self._w = 2.0 * np.pi / self.period

    def __call__(self, tau, deriv=0):
        """Evaluate the interpolant (or its ``deriv``-th derivative)."""
        tau = np.asarray(tau, dtype=float)
        scalar = tau.ndim == 0
        phase = np.multiply.outer(np.atleast_1d(tau) % self.period,
                                  self._w * self.harmonics)
        c, s = np.cos(phase), np.sin(phase)
        kw = (self._w * self.harmonics) ** deriv
        # d^q/dtau^q of (a cos + b sin) cycles through (-a sin + b cos), ...
        q = deriv % 4
        if q == 0:
            out = (c * kw) @ self._cos + (s * kw) @ self._sin
        elif q == 1:
            out = -(s * kw) @ self._cos + (c * kw) @ self._sin
        elif q == 2:
            out = -(c * kw) @ self._cos - (s * kw) @ self._sin
        else:
            out = (s * kw) @ self._cos - (c * kw) @ self._sin
        out = out.reshape(out.shape[:1] + self.channel_shape)
        return out[0] if scalar else out
