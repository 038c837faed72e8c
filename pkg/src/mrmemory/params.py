"""Dimensionless groups of the Maxey-Riley equation.

The particle is described by the density ratio ``R``, the Stokes number
``St`` and the flow Reynolds number ``Re``.  Everything else follows::

    mu = R / St          kappa = sqrt(9 R / 2)
    gamma = 9 R / (2 Re) eps = 1 / mu = St / R
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class PhysicalSetup:
    """Dimensional description of a particle suspended in a flow.

    Attributes
    ----------
    rho_p, rho_f : particle and fluid densities
    a : particle radius
    nu : kinematic viscosity
    U, L : characteristic velocity and length of the flow
    g : gravitational acceleration vector
    """

    rho_p: float
    rho_f: float
    a: float
    nu: float
    U: float
    L: float
    g: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("rho_p", "rho_f", "a", "nu", "U", "L"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise DomainError(f"{name} must be positive and finite, got {value!r}")
        if not all(math.isfinite(c) for c in self.g):
            raise DomainError(f"g must be finite, got {self.g!r}")
        if self.a / self.L > 0.1:
            warnings.warn(
                f"a/L = {self.a / self.L:.3g} is not small; the equation of motion assumes a << L",
                stacklevel=2,
            )


@dataclass(frozen=True)
class ParticleParams:
    """Dimensionless particle parameters.

    Build instances through :meth:`from_dimensionless`, :meth:`from_physical`
    or :meth:`memoryless`; the derived fields are filled in automatically.
    """

    R: float
    St: float
    Re: float
    g_scaled: tuple = (0.0, 0.0)
    synthetic: bool = False
    kappa: float = field(default=math.nan)
    mu: float = field(init=False)
    gamma: float = field(init=False)
    eps: float = field(init=False)

    def __post_init__(self):
        if not (0.0 < self.R < 2.0):
            raise DomainError(f"density ratio R must lie in (0, 2), got {self.R!r}")
        if not (self.St > 0.0 and math.isfinite(self.St)):
            raise DomainError(f"Stokes number must be positive, got {self.St!r}")
        if not (self.Re > 0.0 and math.isfinite(self.Re)):
            raise DomainError(f"Reynolds number must be positive, got {self.Re!r}")
        object.__setattr__(self, "g_scaled", tuple(float(c) for c in self.g_scaled))
        if self.synthetic:
            if not (self.kappa >= 0.0 and math.isfinite(self.kappa)):
                raise DomainError(f"synthetic kappa must be >= 0, got {self.kappa!r}")
        else:
            object.__setattr__(self, "kappa", math.sqrt(4.5 * self.R))
        object.__setattr__(self, "mu", self.R / self.St)
        object.__setattr__(self, "gamma", 4.5 * self.R / self.Re)
        object.__setattr__(self, "eps", self.St / self.R)

    @classmethod
    def from_dimensionless(cls, R, St, Re=1.0, g_scaled=(0.0, 0.0)):
        return cls(R=float(R), St=float(St), Re=float(Re), g_scaled=tuple(g_scaled))

    @classmethod
    def from_physical(cls, setup: PhysicalSetup) -> "ParticleParams":
        Re = setup.U * setup.L / setup.nu
        St = (2.0 / 9.0) * (setup.a / setup.L) ** 2 * Re
        R = 2.0 * setup.rho_f / (setup.rho_f + 2.0 * setup.rho_p)
        g_scaled = tuple(float(c) * setup.L / setup.U**2 for c in setup.g)
        return cls(R=R, St=St, Re=Re, g_scaled=g_scaled)

    @classmethod
    def memoryless(cls, R, St, Re=1.0, kappa=0.0, g_scaled=(0.0, 0.0)):
        """Synthetic parameters with the memory strength overridden.

        ``kappa=0`` switches the history force off, which turns the relative
        velocity equation into classical exponential relaxation.
        """
        return cls(R=float(R), St=float(St), Re=float(Re), g_scaled=tuple(g_scaled),
                   synthetic=True, kappa=float(kappa))

    @property
    def buoyancy_coefficient(self) -> float:
        """The factor ``3R/2 - 1`` multiplying the fluid acceleration."""
        return 1.5 * self.R - 1.0

    @property
    def faxen_coefficient(self) -> float:
        """``gamma / (6 mu)``, the weight of the Laplacian corrections."""
        return self.gamma / (6.0 * self.mu)

    @property
    def lambdas(self):
        """Roots of ``z**2 - kappa z + 1`` (complex when kappa < 2)."""
        disc = np.sqrt(complex(self.kappa**2 - 4.0))
        return (self.kappa + disc) / 2.0, (self.kappa - disc) / 2.0

    def as_dict(self) -> dict:
        return {
            "R": self.R, "St": self.St, "Re": self.Re, "g_scaled": list(self.g_scaled),
            "synthetic": self.synthetic, "kappa": self.kappa, "mu": self.mu,
            "gamma": self.gamma, "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParticleParams":
        if data.get("synthetic"):
            return cls.memoryless(data["R"], data["St"], data["Re"], data["kappa"], data["g_scaled"])
        return cls.from_dimensionless(data["R"], data["St"], data["Re"], data["g_scaled"])
