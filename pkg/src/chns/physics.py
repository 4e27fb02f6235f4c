"""Coefficient laws and the relaxed double-obstacle free energy.

The mass density interpolates linearly between the fluid densities on the
physically relevant range of the phase field and is cut off to a constant
outside, with a C^1 monotone cubic blend on the two transition bands, so that
0 < rho_min <= rho(phi) <= rho_max holds for every real phi.  The free energy
is the Moreau-Yosida relaxation of the double obstacle,

    F(phi) = (sigma/2 eps) * (1 - phi^2 + s * lambda(phi)^2),
    lambda(phi) = max(0, phi - 1) + min(0, phi + 1),

split into its convex part F_plus = (s sigma / 2 eps) lambda^2 (implicit) and
concave part F_minus = (sigma / 2 eps)(1 - phi^2) (explicit).
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PhysParams", "FreeEnergy"]


@dataclass(frozen=True)
class PhysParams:
    """Physical and numerical parameters of a run."""

    rho1: float = 1.0            # density at phi = -1
    rho2: float = 1.0            # density at phi = +1
    eta1: float = 1.0            # viscosity at phi = -1
    eta2: float = 1.0            # viscosity at phi = +1
    mobility_scale: float = 1e-5
    sigma: float = 0.01
    epsilon: float = 0.01
    s: float = 10000.0
    gravity: tuple = (0.0, 0.0)
    tau: float = 1e-5

    def __post_init__(self):
        if not (0 < self.rho1 <= self.rho2):
            raise ValueError("densities must satisfy 0 < rho1 <= rho2")
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("viscosities must be positive")
        for name in ("mobility_scale", "sigma", "epsilon", "s", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if len(self.gravity) != 2:
            raise ValueError("gravity must be a 2-vector")

    # -- density with cut-off ------------------------------------------------

    def _bands(self):
        """Transition bands of the density cut-off (requires rho2 > rho1)."""
        r = self.rho1 / (self.rho2 - self.rho1)
        return 1.0 + r, 1.0 + 2.0 * r

    def rho(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if self.rho1 == self.rho2:
            return np.full_like(phi, self.rho1)
        slope = 0.5 * (self.rho2 - self.rho1)
        mean = 0.5 * (self.rho1 + self.rho2)
        lin = slope * phi + mean
        b1, b2 = self._bands()
        width = b2 - b1
        out = np.array(lin)
        # upper blend: value rho(b1), slope -> 0, cubic with g(t) = t - t^3/3
        t = np.clip((phi - b1) / width, 0.0, 1.0)
        hi = (slope * b1 + mean) + slope * width * (t - t**3 / 3.0)
        out = np.where(phi > b1, hi, out)
        t = np.clip((-phi - b1) / width, 0.0, 1.0)
        lo = (-slope * b1 + mean) - slope * width * (t - t**3 / 3.0)
        out = np.where(phi < -b1, lo, out)
        return out

    def drho_dphi(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if self.rho1 == self.rho2:
            return np.zeros_like(phi)
        slope = 0.5 * (self.rho2 - self.rho1)
        b1, b2 = self._bands()
        width = b2 - b1
        t = np.clip((np.abs(phi) - b1) / width, 0.0, 1.0)
        return np.where(np.abs(phi) <= b1, slope, slope * (1.0 - t**2))

    def d2rho_dphi2(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if self.rho1 == self.rho2:
            return np.zeros_like(phi)
        slope = 0.5 * (self.rho2 - self.rho1)
        b1, b2 = self._bands()
        width = b2 - b1
        a = np.abs(phi)
        inside = (a > b1) & (a < b2)
        t = np.clip((a - b1) / width, 0.0, 1.0)
        return np.where(inside, -2.0 * slope * t / width * np.sign(phi), 0.0)

    @property
    def rho_min(self):
        if self.rho1 == self.rho2:
            return self.rho1
        return float(self.rho(np.array(-10.0 - 2.0 * self._bands()[1])))

    @property
    def rho_max(self):
        if self.rho1 == self.rho2:
            return self.rho1
        return float(self.rho(np.array(10.0 + 2.0 * self._bands()[1])))

    # -- viscosity and mobility ----------------------------------------------

    def eta(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        lin = 0.5 * ((self.eta2 - self.eta1) * phi + (self.eta1 + self.eta2))
        lo, hi = min(self.eta1, self.eta2), max(self.eta1, self.eta2)
        return np.clip(lin, lo, hi)

    def deta_dphi(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        return np.where(np.abs(phi) < 1.0, 0.5 * (self.eta2 - self.eta1), 0.0)

    def mobility(self, phi=None):
        if phi is None:
            return self.mobility_scale
        return np.full_like(np.asarray(phi, dtype=np.float64), self.mobility_scale)

    @property
    def eta_min(self):
        return min(self.eta1, self.eta2)

    def free_energy(self):
        return FreeEnergy(self.sigma, self.epsilon, self.s)


@dataclass(frozen=True)
class FreeEnergy:
    """Relaxed double-obstacle energy with convex-concave splitting."""

    sigma: float
    epsilon: float
    s: float
    scale: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "scale", self.sigma / (2.0 * self.epsilon))

    @staticmethod
    def lam(phi):
        phi = np.asarray(phi, dtype=np.float64)
        return np.maximum(0.0, phi - 1.0) + np.minimum(0.0, phi + 1.0)

    def F_plus(self, phi):
        return self.s * self.scale * self.lam(phi) ** 2

    def F_minus(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        return self.scale * (1.0 - phi**2)

    def F(self, phi):
        return self.F_plus(phi) + self.F_minus(phi)

    def dF_plus(self, phi):
        return 2.0 * self.s * self.scale * self.lam(phi)

    def dF_minus(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        return -2.0 * self.scale * phi

    def dF(self, phi):
        return self.dF_plus(phi) + self.dF_minus(phi)

    def newton_G(self, phi):
        """a.e. Newton derivative of dF_plus: active where |phi| > 1."""
        phi = np.asarray(phi, dtype=np.float64)
        return np.where(np.abs(phi) > 1.0, 2.0 * self.s * self.scale, 0.0)
